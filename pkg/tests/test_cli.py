import json

import pytest

from sim3recon.cli import main
from sim3recon.formats import PlyStreamWriter, read_tum
from sim3recon.graph import load_graph
from sim3recon.pipeline import TRAJECTORY_FILE


@pytest.fixture(scope="module")
def chunks(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "chunks"
    assert main(["simulate", "--out", str(d), "--seed", "1", "--set", "n_frames=1500"]) == 0
    return d


def test_simulate_and_run(chunks, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SIM3RECON_MAX_RESIDENT", "3")
    assert main(["run", "--chunks", str(chunks), "--out", str(tmp_path / "o"), "--set", "write_points=false"]) == 0
    assert len(read_tum(tmp_path / "o" / TRAJECTORY_FILE)) == 1500
    assert "wrote results" in capsys.readouterr().out


def test_eval_trajectory(chunks, tmp_path, capsys):
    gt = chunks / "groundtruth.txt"
    assert main(["eval", "--est", str(gt), "--ref", str(gt)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ate_rmse"] == 0.0 and out["poses"] == 1500
    assert main(["eval", "--est", str(gt), "--ref", str(gt), "--match-timestamps", "--alignment", "none"]) == 0


def test_eval_cloud(tmp_path, capsys):
    import numpy as np

    with PlyStreamWriter(tmp_path / "a.ply") as w:
        w.write(np.random.default_rng(0).normal(size=(200, 3)))
    assert main(["eval", "--est-cloud", str(tmp_path / "a.ply"), "--ref-cloud", str(tmp_path / "a.ply")]) == 0
    assert json.loads(capsys.readouterr().out)["chamfer"] == 0.0


def test_eval_errors(tmp_path):
    assert main(["eval"]) == 2
    assert main(["eval", "--est", str(tmp_path / "x.txt")]) == 2
    assert main(["eval", "--est", str(tmp_path / "x.txt"), "--ref", str(tmp_path / "y.txt")]) == 2


def test_graph_dump_and_load(chunks, tmp_path, capsys):
    g = tmp_path / "g.g2o"
    assert main(["graph", "dump", "--chunks", str(chunks), "--out", str(g)]) == 0
    graph = load_graph(g)
    assert len(graph.nodes) == 25
    assert any(e.kind == "loop" for e in graph.edges)
    capsys.readouterr()
    assert main(["graph", "load", str(g), "--optimize", "--out", str(tmp_path / "opt.g2o")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["final_cost"] < info["cost"]
    assert (tmp_path / "opt.g2o").exists()
    assert main(["graph", "load", str(g), "--optimize", "--set", "max_iterations=2"]) == 0
    assert main(["graph", "load", str(g), "--optimize", "--set", "bogus=1"]) == 2


def test_graph_load_errors(tmp_path):
    assert main(["graph", "load", str(tmp_path / "missing.g2o")]) == 2
    (tmp_path / "bad.g2o").write_text("EDGE_SIM3 1 2\n")
    assert main(["graph", "load", str(tmp_path / "bad.g2o")]) == 2


def test_run_errors(tmp_path):
    assert main(["run", "--chunks", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--chunks", str(tmp_path), "--set", "stride"]) == 2
    assert main(["run", "--chunks", str(tmp_path), "--set", "unknown_key=1"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_bad_residency_env(chunks, tmp_path, monkeypatch):
    monkeypatch.setenv("SIM3RECON_MAX_RESIDENT", "0")
    assert main(["run", "--chunks", str(chunks), "--out", str(tmp_path / "o")]) == 2


def test_eval_cloud_coarse_alignment(tmp_path, capsys):
    import numpy as np

    from sim3recon.formats import Trajectory, write_tum
    from sim3recon.sim3 import Sim3

    rng = np.random.default_rng(3)
    S = Sim3.exp([2.0, -1.0, 0.5, 0.3, -0.2, 0.4, 0.7])
    ref_pos = np.cumsum(rng.normal(size=(50, 3)), axis=0)
    q = np.tile([0, 0, 0, 1.0], (50, 1))
    write_tum(Trajectory(np.arange(50), ref_pos, q), tmp_path / "ref.txt")
    write_tum(Trajectory(np.arange(50), S.inverse().act(ref_pos), q), tmp_path / "est.txt")
    cloud = rng.uniform(-10, 10, size=(3000, 3))
    with PlyStreamWriter(tmp_path / "ref.ply") as w:
        w.write(cloud)
    with PlyStreamWriter(tmp_path / "est.ply") as w:
        w.write(S.inverse().act(cloud))
    args = ["eval", "--est-cloud", str(tmp_path / "est.ply"), "--ref-cloud", str(tmp_path / "ref.ply")]
    assert main(args + ["--est", str(tmp_path / "est.txt"), "--ref", str(tmp_path / "ref.txt")]) == 0
    assert json.loads(capsys.readouterr().out)["chamfer"] < 1e-4
    # without the trajectories only rigid ICP runs and the scale stays wrong
    assert main(args) == 0
    assert json.loads(capsys.readouterr().out)["chamfer"] > 0.1
