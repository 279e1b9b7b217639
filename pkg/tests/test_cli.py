import csv
import json

import numpy as np
import pytest

from beenav.cli import build_config, build_parser, main, read_config_file, render_tunnel_image
from beenav.explain import FeaturePartition, exact_shapley, policy_mean_model, rollout_observations
from beenav.flow import CameraModel, FlowImage, read_pgm
from beenav.net import load_checkpoint
from beenav.ppo import METRIC_COLUMNS, TrainConfig
from beenav.world import tunnel_library

TINY_FLAGS = ["--width-px", "16", "--height-px", "12", "--conv-kernel", "4", "--conv-stride", "2",
              "--conv-channels", "3", "--hidden", "5", "--obs-clip", "40", "--steps-per-epoch", "64",
              "--minibatch-size", "32", "--update-passes", "1", "--n-agents", "1"]


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_file_with_include(tmp_path):
    (tmp_path / "base.cfg").write_text("# base\nepochs = 5\nseed = 3\nlr_decay = false\n")
    (tmp_path / "run.cfg").write_text("include = base.cfg\nepochs = 7  # override\nlearning-rate = 1e-3\n")
    values = read_config_file(tmp_path / "run.cfg")
    cfg = build_config(values)
    assert (cfg.epochs, cfg.seed, cfg.lr_decay, cfg.learning_rate) == (7, 3, False, 1e-3)


def test_config_errors(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("epochz = 3\n")
    assert run("train", tmp_path / "run", "--config", tmp_path / "bad.cfg") == 2
    assert "epochz" in capsys.readouterr().err
    (tmp_path / "a.cfg").write_text("include = b.cfg\n")
    (tmp_path / "b.cfg").write_text("include = a.cfg\n")
    assert run("train", tmp_path / "run2", "--config", tmp_path / "a.cfg") == 2
    assert run("train", tmp_path / "run3", "--gamma", "1.5") == 2
    assert run("train", tmp_path / "run4", "--epochs", "three") == 2
    with pytest.raises(SystemExit) as exc:
        run("train", tmp_path / "run5", "--no-such-key", "1")
    assert exc.value.code == 2


def test_every_config_key_has_a_flag():
    parser = build_parser()
    for name in TrainConfig.field_names():
        dash = "--" + name.replace("_", "-")
        args = parser.parse_args(["train", "x", dash, "1"])
        assert getattr(args, f"cfg_{name}") == "1"
        args = parser.parse_args(["train", "x", "--" + name, "1"])
        assert getattr(args, f"cfg_{name}") == "1"


def test_train_epochs_zero(tmp_path):
    out = tmp_path / "run"
    assert run("train", out, "--epochs", 0, *TINY_FLAGS, "--n-agents", 2) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 0 and manifest["agent_seeds"] == [0, 1]
    assert len(manifest["tunnel_library_hash"]) == 64
    assert sorted(p.name for p in out.glob("*.ckpt")) == ["agent0_epoch0.ckpt", "agent1_epoch0.ckpt"]
    assert (out / "metrics.csv").read_text() == ",".join(METRIC_COLUMNS) + "\n"


def test_default_config_schedules_paper_protocol():
    cfg = build_config({})
    assert (cfg.n_agents, cfg.epochs, cfg.steps_per_epoch) == (4, 100, 1024)


def test_train_refuses_overwrite(tmp_path):
    out = tmp_path / "run"
    assert run("train", out, "--epochs", 0, *TINY_FLAGS) == 0
    assert run("train", out, "--epochs", 0, *TINY_FLAGS) == 3
    assert run("train", out, "--epochs", 0, *TINY_FLAGS, "--force") == 0


def test_train_seed_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("train", tmp_path / name, "--epochs", 2, "--seed", 7, *TINY_FLAGS) == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    rows = read_csv(tmp_path / "a/metrics.csv")
    assert len(rows) == 2


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "tiny"
    assert run("train", out, "--epochs", 1, *TINY_FLAGS, "--n-agents", 2, "--tunnels", "easy") == 0
    return out


def test_rollout_outputs(tiny_run, tmp_path):
    ckpt = tiny_run / "agent0_epoch1.ckpt"
    assert run("rollout", ckpt, "--episodes", 3, "--seed", 1, "--out", tmp_path / "r1") == 0
    summary = json.loads((tmp_path / "r1/summary.json").read_text())
    assert summary["success"] + summary["crash"] + summary["timeout"] == 3
    assert summary["mean_lateral_offset"] >= 0
    rows = read_csv(tmp_path / "r1/summary.csv")
    assert len(rows) == 3
    traj = read_csv(tmp_path / "r1/episode_000.csv")
    assert traj[0]["event"] == "start" and traj[-1]["event"] == rows[0]["outcome"]
    assert int(rows[0]["steps"]) == len(traj) - 1


def test_rollout_deterministic_twice(tiny_run, tmp_path):
    ckpt = tiny_run / "agent1_epoch1.ckpt"
    for name in ("a", "b"):
        assert run("rollout", ckpt, "--episodes", 2, "--seed", 4, "--out", tmp_path / name) == 0
    for f in ("summary.csv", "episode_000.csv", "episode_001.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_rollout_zero_episodes(tiny_run, tmp_path):
    assert run("rollout", tiny_run / "agent0_epoch0.ckpt", "--episodes", 0, "--out", tmp_path / "z") == 0
    assert (tmp_path / "z/summary.csv").read_text().strip() == ",".join(
        ["episode", "outcome", "steps", "return", "progress", "mean_abs_offset"])


def test_rollout_random_policy(tmp_path):
    assert run("rollout", "--random-policy", "--episodes", 5, "--out", tmp_path / "rand") == 0
    summary = json.loads((tmp_path / "rand/summary.json").read_text())
    assert summary["policy"] == "random" and 0 <= summary["success_rate"] <= 1


def test_rollout_errors(tiny_run, tmp_path):
    assert run("rollout", tiny_run / "agent0_epoch0.ckpt", "--tunnel", 42, "--out", tmp_path / "e1") == 2
    assert run("rollout", tmp_path / "missing.ckpt", "--out", tmp_path / "e2") == 3
    (tmp_path / "junk.ckpt").write_bytes(b"BNAV" + b"\0" * 10)
    assert run("rollout", tmp_path / "junk.ckpt", "--out", tmp_path / "e3") == 3
    assert run("rollout", "--out", tmp_path / "e4") == 2


def test_explain_single_and_four(tiny_run, tmp_path):
    c0, c1 = tiny_run / "agent0_epoch1.ckpt", tiny_run / "agent1_epoch1.ckpt"
    assert run("explain", c0, "--regions", "4x4", "--max-steps", 2, "--samples", 256, "--out", tmp_path / "one") == 0
    meta = json.loads((tmp_path / "one/metadata.json").read_text())
    assert meta["n_agents"] == 1 and meta["timesteps"] == [0, 1]
    one = np.loadtxt(tmp_path / "one/t0000_attention.csv", delimiter=",")
    assert np.array_equal(one, np.loadtxt(tmp_path / "one/t0000_agent0.csv", delimiter=","))

    assert run("explain", c0, c1, c0, c1, "--regions", "4x4", "--max-steps", 2, "--out", tmp_path / "four") == 0
    meta = json.loads((tmp_path / "four/metadata.json").read_text())
    assert meta["n_agents"] == 4 and len(meta["agents"]) == 4
    att = np.loadtxt(tmp_path / "four/t0001_attention.csv", delimiter=",")
    per = [np.loadtxt(tmp_path / f"four/t0001_agent{k}.csv", delimiter=",") for k in range(4)]
    assert np.allclose(att, np.mean(per, axis=0), atol=1e-12)
    assert read_pgm(tmp_path / "four/t0001_composite.pgm").shape == (12, 34)
    rows = read_csv(tmp_path / "four/timesteps.csv")
    assert [r["timestep"] for r in rows] == ["0", "1"]


def test_explain_architecture_mismatch(tiny_run, tmp_path):
    other = tmp_path / "other"
    assert run("train", other, "--epochs", 0, *TINY_FLAGS, "--hidden", 6) == 0
    assert run("explain", tiny_run / "agent0_epoch0.ckpt", other / "agent0_epoch0.ckpt",
               "--out", tmp_path / "x") == 2
    assert run("explain", *[tiny_run / "agent0_epoch0.ckpt"] * 5, "--out", tmp_path / "y") == 2


def test_explain_toy_4x4_matches_exact_shapley(tmp_path):
    run_dir = tmp_path / "toy"
    assert run("train", run_dir, "--epochs", 0, "--width-px", 4, "--height-px", 4, "--conv-kernel", 2,
               "--conv-stride", 2, "--conv-channels", 2, "--hidden", 3, "--obs-clip", 5, "--n-agents", 1,
               "--steps-per-epoch", 8, "--minibatch-size", 8) == 0
    ckpt = run_dir / "agent0_epoch0.ckpt"
    assert run("explain", ckpt, "--regions", "1x1", "--sigma", 0, "--max-steps", 3, "--seed", 2,
               "--out", tmp_path / "ex") == 0
    assert json.loads((tmp_path / "ex/metadata.json").read_text())["exhaustive"] is True
    agent = load_checkpoint(ckpt)
    records, _ = rollout_observations(agent, tunnel_library()[0], 2, CameraModel(4, 4), True, 3)
    part = FeaturePartition(4, 4, 1, 1)
    for step, _, obs in records:
        exact = exact_shapley(policy_mean_model(agent), obs, FlowImage.zeros(4, 4), part)
        expected = np.abs(exact.phi).sum(axis=1).reshape(4, 4)
        got = np.loadtxt(tmp_path / f"ex/t{step:04d}_attention.csv", delimiter=",")
        assert np.allclose(got, expected, atol=1e-9, rtol=0)


def test_eval_curve(tiny_run, tmp_path):
    out = tmp_path / "curve.csv"
    assert run("eval-curve", tiny_run, "--episodes", 2, "--out", out) == 0
    rows = read_csv(out)
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert run("eval-curve", tiny_run, "--episodes", 2, "--out", out) == 3
    assert run("eval-curve", tiny_run, "--episodes", 2, "--out", out, "--force") == 0
    assert read_csv(out) == rows


def test_eval_curve_missing_checkpoints(tiny_run, tmp_path, capsys):
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(tiny_run, broken)
    (broken / "agent0_epoch0.ckpt").unlink()
    assert run("eval-curve", broken, "--episodes", 1) == 3
    assert "agent0_epoch0.ckpt" in capsys.readouterr().err


def test_render_tunnel(tmp_path):
    tunnel = tunnel_library()[0]
    traj = tmp_path / "t.csv"
    traj.write_text("step,t,x,y,vx,vy,ax,ay,reward,event\n0,0,1.0,0.0,0,0,0,0,0,start\n1,0.05,2.0,0.5,0,0,0,0,0,\n")
    assert run("render-tunnel", "--tunnel", 0, "--trajectory", traj, "--out", tmp_path / "m.pgm") == 0
    img = read_pgm(tmp_path / "m.pgm")
    assert img.shape == (4 * 20 + 3, 20 * 20 + 1)
    assert (img[0] == 0).all() and (img[-1] == 0).all()
    grid = render_tunnel_image(tunnel, [[(2.0, 0.5)]])
    assert grid[int(round(1.5 * 20)) + 1, 40] == 0.2
    ob = tunnel.obstacles[0]
    assert grid[int(round((2 - ob.center[1]) * 20)) + 1, int(ob.center[0] * 20)] == 0.5
