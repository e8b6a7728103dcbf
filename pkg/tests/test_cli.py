import subprocess
import sys

import numpy as np
import pytest

from nfrl.agents import CriticNet
from nfrl.checkpoint import (load_critic_checkpoint, load_flow_checkpoint,
                             save_critic_checkpoint, save_flow_checkpoint)
from nfrl.cli import main
from nfrl.config import (ALPHA_PRESETS, GAMMA_FUT_PRESETS, RunConfig,
                         load_config, to_text)
from nfrl.envs import load_dataset
from nfrl.errors import CheckpointError, ConfigError
from nfrl.flow import FlowConfig, FlowModel
from nfrl.metrics import read_metrics, series_without_walltime

TINY = ["--set", "blocks=2", "--set", "channels=8", "--set", "rep_dims=4",
        "--set", "encoder_layers=1", "--set", "batch=64"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "open.nfd"
    rc = main(["gen-data", "--env", "open", "--n-traj", "6", "--seed", "3",
               "--out", str(out)])
    assert rc == 0
    return out


def train_args(dataset, run_dir, steps, seed=0, extra=()):
    return (["train", "--algo", "bc", "--dataset", str(dataset),
             "--env", "open", "--steps", str(steps), "--seed", str(seed),
             "--run-dir", str(run_dir)] + TINY + list(extra))


# ---------------------------------------------------------------------------
# config


def test_defaults_match_published_tables():
    bc = RunConfig(algorithm="bc").resolved()
    assert bc.blocks == 12
    for algo in ("gcbc", "rlbc", "ugs"):
        assert RunConfig(algorithm=algo).resolved().blocks == 6
    assert bc.channels == 512
    assert bc.noise_std == 0.1
    assert bc.rep_dims == 512
    assert bc.encoder_layers == 4
    assert bc.mask_prob == 0.1
    assert bc.candidate_count == 1024
    assert bc.goal_noise_std == 0.05
    assert bc.gamma == 0.99
    assert bc.lambda_ent == 0.0
    assert GAMMA_FUT_PRESETS == (0.97, 0.99)
    assert ALPHA_PRESETS == (1.0, 10.0)
    assert bc.gamma_fut in GAMMA_FUT_PRESETS
    assert bc.alpha_bc in ALPHA_PRESETS


def test_config_layering_last_writer_wins(tmp_path):
    f1 = tmp_path / "base.cfg"
    f1.write_text("# base\nalgorithm=bc\nsteps=10\nchannels=32\n")
    f2 = tmp_path / "over.cfg"
    f2.write_text("steps=20\n")
    cfg = load_config([f1, f2], ["steps=30"])
    assert cfg.steps == 30 and cfg.channels == 32 and cfg.algorithm == "bc"


def test_config_rejects_unknown_key_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config([], ["blocs=3"])
    with pytest.raises(ConfigError, match="field steps"):
        load_config([], ["steps=ten"])
    with pytest.raises(ConfigError, match="field algorithm"):
        load_config([], ["algorithm=dqn"])
    with pytest.raises(ConfigError, match="field mask_prob"):
        load_config([], ["mask_prob=1.5"])
    bad = tmp_path / "bad.cfg"
    bad.write_text("steps 10\n")
    with pytest.raises(ConfigError, match="expected key=value"):
        load_config([bad], [])


def test_config_snapshot_round_trips(tmp_path):
    cfg = load_config([], ["algorithm=rlbc", "alpha_bc=10.0", "twin=false"])
    snap = tmp_path / "snap.cfg"
    snap.write_text(to_text(cfg))
    again = load_config([snap], [])
    assert again == cfg


# ---------------------------------------------------------------------------
# checkpoints


def test_flow_checkpoint_round_trip(tmp_path):
    model = FlowModel(FlowConfig(event_dim=2, raw_cond_dim=4, blocks=2,
                                 channels=6, encoder_layers=1, rep_dim=3,
                                 seed=5))
    model.store.values[:] = np.random.default_rng(6).standard_normal(
        model.store.size)
    path = tmp_path / "m.nfc"
    save_flow_checkpoint(path, model, step=17)
    again, step = load_flow_checkpoint(path)
    assert step == 17
    np.testing.assert_array_equal(again.store.values, model.store.values)
    assert again.cfg == model.cfg


def test_critic_checkpoint_round_trip(tmp_path):
    critic = CriticNet(6, hidden=(8, 4), tau=0.01, twin=True, seed=7)
    rng = np.random.default_rng(8)
    critic.store.values[:] = rng.standard_normal(critic.store.size)
    critic.target.values[:] = rng.standard_normal(critic.target.size)
    path = tmp_path / "c.nfc"
    save_critic_checkpoint(path, critic, step=5)
    again, step = load_critic_checkpoint(path)
    assert step == 5
    np.testing.assert_array_equal(again.store.values, critic.store.values)
    np.testing.assert_array_equal(again.target.values, critic.target.values)
    assert again.hidden == (8, 4) and again.twin is True


def test_checkpoint_kind_guard(tmp_path):
    critic = CriticNet(6, hidden=(4,), seed=9)
    path = tmp_path / "c.nfc"
    save_critic_checkpoint(path, critic)
    with pytest.raises(CheckpointError, match="expected a flow checkpoint"):
        load_flow_checkpoint(path)


# ---------------------------------------------------------------------------
# gen-data / train / eval / plot-export


def test_gen_data_writes_loadable_dataset(dataset):
    fields, trajs, modes = load_dataset(dataset)
    assert fields["env"] == "open" and len(trajs) == 6
    assert all(t.states.shape[1] == 4 for t in trajs)


def test_train_zero_steps_writes_manifest_and_initial_checkpoint(
        dataset, tmp_path, capsys):
    run = tmp_path / "run0"
    rc = main(train_args(dataset, run, steps=0))
    assert rc == 0
    assert str(run) in capsys.readouterr().out
    assert (run / "manifest.cfg").exists()
    ckpts = sorted(p.name for p in (run / "checkpoints").iterdir())
    assert ckpts == ["step-00000000.actor.nfc"]
    assert read_metrics(run / "metrics.txt") == []


def test_train_same_seed_is_bit_identical_modulo_walltime(dataset, tmp_path):
    r1, r2 = tmp_path / "r1", tmp_path / "r2"
    assert main(train_args(dataset, r1, steps=12, seed=4)) == 0
    assert main(train_args(dataset, r2, steps=12, seed=4)) == 0
    s1 = series_without_walltime(r1 / "metrics.txt")
    s2 = series_without_walltime(r2 / "metrics.txt")
    assert len(s1) == 12 and s1 == s2
    m1, _ = load_flow_checkpoint(r1 / "checkpoints" / "step-00000012.actor.nfc")
    m2, _ = load_flow_checkpoint(r2 / "checkpoints" / "step-00000012.actor.nfc")
    np.testing.assert_array_equal(m1.store.values, m2.store.values)


def test_finished_run_replays_from_its_manifest(dataset, tmp_path):
    r1, r2 = tmp_path / "orig", tmp_path / "replay"
    assert main(train_args(dataset, r1, steps=8, seed=11)) == 0
    rc = main(["train", "--config", str(r1 / "manifest.cfg"),
               "--run-dir", str(r2)])
    assert rc == 0
    assert (series_without_walltime(r1 / "metrics.txt")
            == series_without_walltime(r2 / "metrics.txt"))
    assert (r1 / "manifest.cfg").read_text().splitlines()[3:] \
        == (r2 / "manifest.cfg").read_text().splitlines()[3:]


def test_run_dir_defaults_under_env_root(dataset, tmp_path, monkeypatch,
                                         capsys):
    monkeypatch.setenv("NFRL_RUN_DIR", str(tmp_path / "root"))
    rc = main(["train", "--algo", "bc", "--dataset", str(dataset),
               "--steps", "0"] + TINY)
    assert rc == 0
    printed = capsys.readouterr().out.strip().splitlines()[-1]
    assert printed.startswith(str(tmp_path / "root"))
    assert (tmp_path / "root").exists()


def test_train_rejects_missing_dataset(tmp_path):
    rc = main(["train", "--algo", "bc", "--dataset",
               str(tmp_path / "nope.nfd"), "--steps", "1",
               "--run-dir", str(tmp_path / "r")] + TINY)
    assert rc == 2


def test_train_rejects_bad_config_value(dataset, tmp_path):
    rc = main(train_args(dataset, tmp_path / "r", steps=1,
                         extra=["--set", "mask_prob=2.0"]))
    assert rc == 2


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_numeric_blowup_exits_3_and_keeps_last_checkpoint(dataset, tmp_path):
    run = tmp_path / "blow"
    # lr large enough that the post-update forward pass overflows float64;
    # moderate blowups stay finite under the log-scale clamp
    rc = main(train_args(dataset, run, steps=40,
                         extra=["--set", "lr=1e300",
                                "--set", "checkpoint_every=5"]))
    assert rc == 3
    ckpts = sorted((run / "checkpoints").iterdir())
    assert len(ckpts) >= 1  # at least the initial parameters survive
    final = run / "checkpoints" / "step-00000040.actor.nfc"
    assert not final.exists()
    model, _ = load_flow_checkpoint(ckpts[-1])  # retained one still loads
    assert np.all(np.isfinite(model.store.values))


def test_eval_reports_and_writes(dataset, tmp_path, capsys):
    run = tmp_path / "run-e"
    assert main(train_args(dataset, run, steps=0)) == 0
    ckpt = run / "checkpoints" / "step-00000000.actor.nfc"
    out = tmp_path / "report.txt"
    rc = main(["eval", "--checkpoint", str(ckpt), "--env", "open",
               "--episodes", "3", "--seed", "1", "--out", str(out)])
    assert rc == 0
    text = out.read_text()
    assert "success_rate=" in text and text.count("episode=") == 3
    assert "success_rate=" in capsys.readouterr().out


def test_eval_zero_episodes_empty_report(dataset, tmp_path):
    run = tmp_path / "run-z"
    assert main(train_args(dataset, run, steps=0)) == 0
    ckpt = run / "checkpoints" / "step-00000000.actor.nfc"
    rc = main(["eval", "--checkpoint", str(ckpt), "--env", "open",
               "--episodes", "0"])
    assert rc == 0


def test_eval_corrupted_magic_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.nfc"
    bad.write_bytes(b"XXXX not a checkpoint")
    rc = main(["eval", "--checkpoint", str(bad), "--env", "open",
               "--episodes", "1"])
    assert rc == 2


def test_eval_architecture_mismatch_exits_2(tmp_path):
    model = FlowModel(FlowConfig(event_dim=2, raw_cond_dim=5, blocks=2,
                                 channels=6, encoder_layers=1, rep_dim=3))
    path = tmp_path / "odd.nfc"
    save_flow_checkpoint(path, model)
    rc = main(["eval", "--checkpoint", str(path), "--env", "open",
               "--episodes", "1"])
    assert rc == 2
    wide = FlowModel(FlowConfig(event_dim=3, raw_cond_dim=4, blocks=2,
                                channels=6, encoder_layers=1, rep_dim=3))
    path2 = tmp_path / "wide.nfc"
    save_flow_checkpoint(path2, wide)
    assert main(["eval", "--checkpoint", str(path2), "--env", "open",
                 "--episodes", "1"]) == 2


def test_plot_export_long_format(dataset, tmp_path):
    run = tmp_path / "run-p"
    assert main(train_args(dataset, run, steps=5)) == 0
    out = tmp_path / "long.csv"
    rc = main(["plot-export", "--run", str(run), "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "step,metric,value"
    records = read_metrics(run / "metrics.txt")
    expected_rows = sum(len(r) - 1 for r in records)
    assert len(lines) - 1 == expected_rows
    step, metric, value = lines[1].split(",")
    assert int(step) == 1 and metric in ("wall_ms", "bc_nll")
    float(value)


def test_unknown_check_suite_exits_2(capsys):
    rc = main(["check", "made-up-suite"])
    assert rc == 2
    assert "unknown check suite" in capsys.readouterr().err


def test_check_jacobian_passes_and_prints_table(capsys):
    rc = main(["check", "jacobian", "--quick"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "round-trip max error" in out and "PASS" in out


def test_console_module_entrypoint_runs():
    proc = subprocess.run([sys.executable, "-m", "nfrl", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout and "plot-export" in proc.stdout
