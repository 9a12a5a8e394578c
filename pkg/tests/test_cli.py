"""End-to-end checks of the command-line interface.

Commands run in-process through cli.main so exit codes and stderr are
observable; one test exercises the installed console script. Module
fixtures train small checkpoints once and share them.
"""

import subprocess
import textwrap

import numpy as np
import pytest

from ebmkit.checkpoint import load_checkpoint
from ebmkit.cli import main

ONED_YAML = textwrap.dedent("""\
    model:
      widths: [1, 32, 32, 1]
      spectral_norm: false
    train:
      total_steps: 1200
      batch_size: 64
      lr: 3.0e-3
    langevin:
      steps: 40
    dataset:
      kind: mixture
      centers: [[0.5]]
      sigma: 0.05
      n: 512
      n_test: 128
    """)

COND_YAML = textwrap.dedent("""\
    model:
      widths: [2, 32, 32, 1]
      num_classes: 2
      spectral_norm: false
    train:
      total_steps: 300
      batch_size: 64
      lr: 3.0e-3
    langevin:
      steps: 30
    dataset:
      kind: mixture
      centers: [[0.25, 0.5], [0.75, 0.5]]
      sigma: 0.05
      n: 512
      n_test: 128
    """)

TRAJ_YAML = textwrap.dedent("""\
    model:
      widths: [5, 32, 32, 1]
      spectral_norm: false
    train:
      total_steps: 200
      batch_size: 64
      lr: 3.0e-3
    langevin:
      steps: 20
    dataset:
      kind: trajectories
      n_trajectories: 30
      length: 20
    """)

SPRITE_YAML = textwrap.dedent("""\
    model:
      widths: [256, 16, 1]
      spectral_norm: false
    train:
      total_steps: 0
    dataset:
      kind: sprites
      scales: [0.5]
      n_per_combo: 4
    """)


def _train(tmp, name, yaml_text, seed):
    cfg = tmp / f"{name}.yaml"
    cfg.write_text(yaml_text)
    out = tmp / f"{name}.bin"
    assert main(["train", "--config", str(cfg), "--out", str(out),
                 "--seed", str(seed)]) == 0
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def oned_ckpt(workdir):
    return _train(workdir, "oned", ONED_YAML, seed=11)


@pytest.fixture(scope="module")
def cond_ckpt(workdir):
    return _train(workdir, "cond", COND_YAML, seed=5)


@pytest.fixture(scope="module")
def traj_ckpt(workdir):
    return _train(workdir, "traj", TRAJ_YAML, seed=4)


@pytest.fixture(scope="module")
def sprite_ckpt(workdir):
    return _train(workdir, "sprite", SPRITE_YAML, seed=1)


def _rows(path):
    lines = path.read_text().strip().splitlines()
    return lines[0], lines[1:]


# ---------------------------------------------------------------------------
# train

def test_train_writes_checkpoint_and_metrics(cond_ckpt):
    metrics = cond_ckpt.parent / (cond_ckpt.name + ".metrics.csv")
    header, rows = _rows(metrics)
    assert header == "step,e_pos,e_neg,loss"
    assert len(rows) == 300
    bundle = load_checkpoint(cond_ckpt)
    assert bundle.manifest["step_count"] == 300
    assert bundle.manifest["dataset"]["kind"] == "mixture"
    assert bundle.manifest["seed"] == 5


def test_zero_step_train_yields_loadable_checkpoint(sprite_ckpt):
    bundle = load_checkpoint(sprite_ckpt)
    assert tuple(bundle.manifest["model"]["widths"]) == (256, 16, 1)
    assert bundle.manifest["step_count"] == 0
    assert len(bundle.buffer) == 0


def test_train_is_byte_deterministic(workdir):
    cfg = workdir / "det.yaml"
    cfg.write_text(COND_YAML.replace("total_steps: 300", "total_steps: 40"))
    outs = []
    for run in ("a", "b"):
        out = workdir / f"det_{run}.bin"
        assert main(["train", "--config", str(cfg), "--out", str(out),
                     "--seed", "33"]) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    m0 = (workdir / "det_a.bin.metrics.csv").read_bytes()
    m1 = (workdir / "det_b.bin.metrics.csv").read_bytes()
    assert m0 == m1


# ---------------------------------------------------------------------------
# sample

def test_sample_steps_zero_with_init_file_round_trips_bytes(oned_ckpt,
                                                            workdir):
    init = workdir / "init.csv"
    out = workdir / "echo.csv"
    assert main(["sample", "--checkpoint", str(oned_ckpt), "--n", "4",
                 "--steps", "5", "--out", str(init), "--seed", "3"]) == 0
    assert main(["sample", "--checkpoint", str(oned_ckpt), "--steps", "0",
                 "--init-file", str(init), "--out", str(out),
                 "--seed", "99"]) == 0
    assert init.read_bytes() == out.read_bytes()


def test_sample_shape_bounds_and_determinism(cond_ckpt, workdir):
    outs = []
    for run in ("s1", "s2"):
        out = workdir / f"{run}.csv"
        assert main(["sample", "--checkpoint", str(cond_ckpt), "--n", "32",
                     "--label", "0", "--steps", "20", "--out", str(out),
                     "--seed", "9"]) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    x = np.loadtxt(outs[0], delimiter=",", ndmin=2)
    assert x.shape == (32, 2)
    assert np.all(x >= 0.0) and np.all(x <= 1.0)


def test_sample_conditional_without_label_fails(cond_ckpt, workdir, capsys):
    out = workdir / "nolabel.csv"
    code = main(["sample", "--checkpoint", str(cond_ckpt), "--n", "4",
                 "--out", str(out), "--seed", "1"])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error label:")
    assert "\n" not in err.strip()


def test_pgm_grid_output(sprite_ckpt, workdir):
    out = workdir / "grid.pgm"
    assert main(["sample", "--checkpoint", str(sprite_ckpt), "--n", "4",
                 "--steps", "0", "--format", "pgm", "--out", str(out),
                 "--seed", "2"]) == 0
    tokens = out.read_text().split()
    assert tokens[0] == "P2"
    width, height, maxval = (int(t) for t in tokens[1:4])
    # four 16x16 tiles in a 2x2 grid
    assert (width, height, maxval) == (32, 32, 255)
    pixels = np.array(tokens[4:], dtype=int)
    assert pixels.size == width * height
    assert pixels.min() >= 0 and pixels.max() <= 255


# ---------------------------------------------------------------------------
# inpaint

def test_inpaint_holds_unmasked_components(cond_ckpt, workdir):
    rng = np.random.default_rng(0)
    inp = workdir / "inp_in.csv"
    mask = workdir / "inp_mask.csv"
    out = workdir / "inp_out.csv"
    np.savetxt(inp, rng.uniform(size=(6, 2)), fmt="%.17g", delimiter=",")
    mask.write_text("0,1\n")
    assert main(["inpaint", "--checkpoint", str(cond_ckpt),
                 "--input", str(inp), "--mask", str(mask), "--label", "1",
                 "--steps", "15", "--out", str(out), "--seed", "4"]) == 0
    before = np.loadtxt(inp, delimiter=",", ndmin=2)
    after = np.loadtxt(out, delimiter=",", ndmin=2)
    assert np.array_equal(before[:, 0], after[:, 0])
    assert not np.array_equal(before[:, 1], after[:, 1])


# ---------------------------------------------------------------------------
# compose

def test_compose_samples_within_bounds(cond_ckpt, workdir):
    out = workdir / "comp.csv"
    assert main(["compose", "--checkpoints", str(cond_ckpt), str(cond_ckpt),
                 "--labels", "0", "1", "--n", "16", "--steps", "40",
                 "--out", str(out), "--seed", "8"]) == 0
    x = np.loadtxt(out, delimiter=",", ndmin=2)
    assert x.shape == (16, 2)
    assert np.all(x >= 0.0) and np.all(x <= 1.0)


def test_compose_with_finetune_config(cond_ckpt, workdir):
    cfg = workdir / "ft.yaml"
    cfg.write_text("finetune:\n  epochs: 2\n  combos: [[0, 1]]\n")
    out = workdir / "compft.csv"
    assert main(["compose", "--checkpoints", str(cond_ckpt), str(cond_ckpt),
                 "--labels", "0", "1", "--finetune-config", str(cfg),
                 "--n", "8", "--steps", "20", "--out", str(out),
                 "--seed", "8"]) == 0
    assert np.loadtxt(out, delimiter=",", ndmin=2).shape == (8, 2)


# ---------------------------------------------------------------------------
# eval

def _metric_values(path):
    header, rows = _rows(path)
    assert header == "metric,config,value"
    out = {}
    for row in rows:
        name, digest, value = row.split(",")
        assert len(digest) == 12 and int(digest, 16) >= 0
        out[name] = float(value)
    return out


def test_logz_bracket_contains_quadrature_truth(oned_ckpt, workdir):
    # slow-mixing annealing settings keep the bracket wide relative to
    # estimator noise, so containment is stable for this seeded run
    out = workdir / "logz.csv"
    assert main(["eval", "--checkpoint", str(oned_ckpt),
                 "--metric", "logz-bracket", "--out", str(out),
                 "--seed", "5", "--chains", "32", "--temps", "10",
                 "--transitions", "1", "--mala-step", "0.002"]) == 0
    vals = _metric_values(out)
    assert vals["logz_lower"] <= vals["logz_quadrature"] <= vals["logz_upper"]
    # 1e-4-resolution midpoint rule on a smooth 1D energy: treat as truth
    assert vals["logz_quadrature"] == pytest.approx(-0.2967660739, abs=1e-6)


def test_eval_is_byte_deterministic(oned_ckpt, workdir):
    files = []
    for run in ("e1", "e2"):
        out = workdir / f"{run}.csv"
        assert main(["eval", "--checkpoint", str(oned_ckpt),
                     "--metric", "logz-bracket", "--out", str(out),
                     "--seed", "7", "--chains", "16", "--temps", "8",
                     "--transitions", "1"]) == 0
        files.append(out)
    assert files[0].read_bytes() == files[1].read_bytes()


def test_ks_overfit_reports_small_gap(cond_ckpt, workdir):
    out = workdir / "ks.csv"
    assert main(["eval", "--checkpoint", str(cond_ckpt),
                 "--metric", "ks-overfit", "--out", str(out)]) == 0
    vals = _metric_values(out)
    assert 0.0 <= vals["ks_overfit"] <= 1.0


def test_mode_coverage_rows(cond_ckpt, workdir):
    out = workdir / "cov.csv"
    assert main(["eval", "--checkpoint", str(cond_ckpt),
                 "--metric", "mode-coverage", "--radius", "0.12",
                 "--out", str(out)]) == 0
    vals = _metric_values(out)
    assert set(vals) == {"coverage_0", "coverage_1", "unassigned"}
    assert all(0.0 <= v <= 1.0 for v in vals.values())


def test_ood_auroc_ranks_data_above_uniform(cond_ckpt, workdir):
    rng = np.random.default_rng(12)
    half = rng.normal(scale=0.05, size=(64, 2))
    inliers = np.clip(np.concatenate([half + [0.25, 0.5],
                                      half + [0.75, 0.5]]), 0, 1)
    outliers = rng.uniform(size=(128, 2))
    fin = workdir / "in.csv"
    fout = workdir / "out.csv"
    np.savetxt(fin, inliers, fmt="%.17g", delimiter=",")
    np.savetxt(fout, outliers, fmt="%.17g", delimiter=",")
    report = workdir / "auroc.csv"
    assert main(["eval", "--checkpoint", str(cond_ckpt),
                 "--metric", "ood-auroc", "--inliers", str(fin),
                 "--outliers", str(fout), "--out", str(report)]) == 0
    assert _metric_values(report)["ood_auroc"] >= 0.6


def test_frechet_rollout_reports_finite_distance(traj_ckpt, workdir):
    out = workdir / "frechet.csv"
    assert main(["eval", "--checkpoint", str(traj_ckpt),
                 "--metric", "frechet-rollout", "--horizon", "10",
                 "--steps", "20", "--out", str(out), "--seed", "6"]) == 0
    value = _metric_values(out)["frechet_rollout_mean"]
    assert np.isfinite(value) and value >= 0.0


def test_logz_rejects_conditional_model(cond_ckpt, workdir, capsys):
    out = workdir / "badlogz.csv"
    code = main(["eval", "--checkpoint", str(cond_ckpt),
                 "--metric", "logz-bracket", "--out", str(out)])
    assert code == 1
    assert capsys.readouterr().err.startswith("error config:")


# ---------------------------------------------------------------------------
# continual

def test_continual_reports_per_task_accuracy(workdir):
    cfg = workdir / "cont.yaml"
    cfg.write_text(textwrap.dedent("""\
        model:
          widths: [2, 32, 32, 1]
          spectral_norm: false
        train:
          total_steps: 100
          batch_size: 32
          lr: 3.0e-3
        langevin:
          steps: 20
        continual:
          centers: [[0.2, 0.3], [0.8, 0.3], [0.2, 0.7], [0.8, 0.7]]
          sigma: 0.03
          n: 400
          n_test: 160
          pairs: [[0, 1], [2, 3]]
          steps_per_task: 100
        """))
    out = workdir / "cont.csv"
    assert main(["continual", "--config", str(cfg), "--out", str(out),
                 "--seed", "2"]) == 0
    header, rows = _rows(out)
    assert header == "task,acc_task,acc_seen"
    assert len(rows) == 2
    for row in rows:
        _, acc_task, acc_seen = row.split(",")
        assert 0.0 <= float(acc_task) <= 1.0
        assert 0.0 <= float(acc_seen) <= 1.0


# ---------------------------------------------------------------------------
# attack

def test_attack_curve_with_refinement(cond_ckpt, workdir):
    out = workdir / "attack.csv"
    assert main(["attack", "--checkpoint", str(cond_ckpt),
                 "--eps", "0,0.1", "--refine", "--refine-steps", "10",
                 "--n", "64", "--out", str(out), "--seed", "3"]) == 0
    header, rows = _rows(out)
    assert header == "eps,accuracy,accuracy_refined"
    assert len(rows) == 2
    clean = rows[0].split(",")
    assert float(clean[0]) == 0.0
    assert float(clean[1]) == float(clean[2]) >= 0.9
    attacked = [float(v) for v in rows[1].split(",")]
    assert attacked[0] == 0.1
    assert all(0.0 <= v <= 1.0 for v in attacked[1:])


# ---------------------------------------------------------------------------
# config and error reporting

def test_unknown_config_section_rejected(workdir, capsys):
    cfg = workdir / "bad_section.yaml"
    cfg.write_text("modelx: {}\n")
    code = main(["train", "--config", str(cfg), "--out",
                 str(workdir / "x.bin")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error config:")
    assert "modelx" in err


def test_unknown_config_key_rejected(workdir, capsys):
    cfg = workdir / "bad_key.yaml"
    cfg.write_text("train:\n  learning_rate: 0.1\ndataset:\n  kind: mixture\n")
    code = main(["train", "--config", str(cfg), "--out",
                 str(workdir / "x.bin")])
    assert code == 1
    assert "train.learning_rate" in capsys.readouterr().err


def test_missing_checkpoint_reports_io_error(workdir, capsys):
    code = main(["sample", "--checkpoint", str(workdir / "missing.bin"),
                 "--out", str(workdir / "x.csv")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error io:")


def test_malformed_yaml_reports_config_error(workdir, capsys):
    cfg = workdir / "mangled.yaml"
    cfg.write_text("train: [unclosed\n")
    code = main(["train", "--config", str(cfg), "--out",
                 str(workdir / "x.bin")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error config:")


def test_console_script_is_installed():
    proc = subprocess.run(["ebmkit", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert "train" in proc.stdout
