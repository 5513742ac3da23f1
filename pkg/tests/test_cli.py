import numpy as np
import pytest

from pushprop import SparsifiedPanel, build_csr, build_panel, weights_for
from pushprop.cli import main, read_predictions
from pushprop.graph import save_edge_list, save_sparse_features, FeatureMatrix


@pytest.fixture
def toy_files(tmp_path, two_triangles):
    graph, features, labels = two_triangles
    paths = {
        "graph": tmp_path / "edges.tsv",
        "features": tmp_path / "features.txt",
        "labels": tmp_path / "labels.txt",
        "train": tmp_path / "train.txt",
        "valid": tmp_path / "valid.txt",
        "test": tmp_path / "test.txt",
    }
    save_edge_list(paths["graph"], graph)
    save_sparse_features(paths["features"], features)
    paths["labels"].write_text(
        "".join(f"{n} {c}\n" for n, c in sorted(labels.labels.items()))
    )
    paths["train"].write_text("".join(f"{i}\n" for i in labels.train))
    paths["valid"].write_text("".join(f"{i}\n" for i in labels.valid))
    paths["test"].write_text("".join(f"{i}\n" for i in labels.test))
    return paths


TOY_HYPERS = [
    "--scheme", "avg", "-N", "2", "--rmax", "1e-9", "-k", "6",
    "--bl", "2", "--bu", "4", "--hidden", "8", "--max-steps", "40",
    "--eval-every", "5", "--patience", "100", "--warmup", "10",
    "--no-normalize-features", "--workers", "1",
]


def _train_args(paths, tmp_path, extra=()):
    return [
        "train",
        "--graph", str(paths["graph"]),
        "--features", str(paths["features"]),
        "--labels", str(paths["labels"]),
        "--train-split", str(paths["train"]),
        "--valid-split", str(paths["valid"]),
        "--test-split", str(paths["test"]),
        "--model", str(tmp_path / "model.gpmd"),
        "--log", str(tmp_path / "log.tsv"),
        *TOY_HYPERS,
        *extra,
    ]


class TestApproximate:
    def test_round_trip_matches_library(self, toy_files, tmp_path, capsys):
        nodes = tmp_path / "nodes.txt"
        nodes.write_text("0\n1\n2\n3\n4\n5\n")
        out = tmp_path / "panel.gpnl"
        rc = main([
            "approximate", "--graph", str(toy_files["graph"]),
            "--nodes", str(nodes), "--scheme", "single", "-N", "2",
            "--rmax", "1e-6", "-k", "32", "--out", str(out), "--workers", "2",
        ])
        assert rc == 0
        line = capsys.readouterr().out.strip()
        assert line.startswith("rows=6 ")
        loaded = SparsifiedPanel.load(out)
        graph = build_csr([(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)], 6)
        expected = build_panel(graph, range(6), weights_for("single", 2), 1e-6, k=32)
        assert loaded == expected

    def test_missing_graph_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["approximate", "--out", str(tmp_path / "p.gpnl")])
        assert exc.value.code == 2

    def test_k_one_rows_have_single_entry(self, toy_files, tmp_path):
        out = tmp_path / "panel.gpnl"
        assert main([
            "approximate", "--graph", str(toy_files["graph"]),
            "--scheme", "avg", "-N", "2", "--rmax", "1e-6", "-k", "1",
            "--out", str(out),
        ]) == 0
        panel = SparsifiedPanel.load(out)
        assert all(row.nnz <= 1 for row in panel.rows.values())


class TestTrain:
    def test_toy_fixture_reaches_perfect_accuracy(self, toy_files, tmp_path, capsys):
        rc = main(_train_args(toy_files, tmp_path, ["--seed", "0"]))
        assert rc == 0
        out = capsys.readouterr().out
        assert "test_accuracy=1.000000" in out
        assert (tmp_path / "model.gpmd").exists()
        assert (tmp_path / "log.tsv").read_text().startswith("step\t")

    def test_same_seed_same_model_bytes(self, toy_files, tmp_path):
        a_dir = tmp_path / "a"
        b_dir = tmp_path / "b"
        a_dir.mkdir()
        b_dir.mkdir()
        main(_train_args(toy_files, a_dir, ["--seed", "7"]))
        main(_train_args(toy_files, b_dir, ["--seed", "7"]))
        assert (a_dir / "model.gpmd").read_bytes() == (b_dir / "model.gpmd").read_bytes()

    def test_infer_eval_round_trip_reproduces_accuracy(self, toy_files, tmp_path,
                                                       capsys):
        main(_train_args(toy_files, tmp_path, ["--seed", "1"]))
        reported = [l for l in capsys.readouterr().out.splitlines()
                    if l.startswith("test_accuracy=")][0]
        preds_path = tmp_path / "preds.tsv"
        assert main([
            "infer", "--model", str(tmp_path / "model.gpmd"),
            "--graph", str(toy_files["graph"]),
            "--features", str(toy_files["features"]),
            "--no-normalize-features",
            "--out", str(preds_path),
        ]) == 0
        assert main([
            "eval", "--preds", str(preds_path),
            "--labels", str(toy_files["labels"]),
            "--split", str(toy_files["test"]),
        ]) == 0
        accuracy_line = capsys.readouterr().out.strip().splitlines()[-1]
        assert accuracy_line == reported.replace("test_accuracy", "accuracy")

    def test_prediction_rows_are_distributions(self, toy_files, tmp_path):
        main(_train_args(toy_files, tmp_path, ["--seed", "3"]))
        preds_path = tmp_path / "preds.tsv"
        main([
            "infer", "--model", str(tmp_path / "model.gpmd"),
            "--graph", str(toy_files["graph"]),
            "--features", str(toy_files["features"]),
            "--no-normalize-features",
            "--out", str(preds_path),
        ])
        preds = read_predictions(preds_path)
        assert np.allclose(preds.probs.sum(axis=1), 1.0, atol=1e-6)

    def test_eval_empty_split_fails(self, toy_files, tmp_path, capsys):
        main(_train_args(toy_files, tmp_path, ["--seed", "1"]))
        preds_path = tmp_path / "preds.tsv"
        main([
            "infer", "--model", str(tmp_path / "model.gpmd"),
            "--graph", str(toy_files["graph"]),
            "--features", str(toy_files["features"]),
            "--no-normalize-features", "--out", str(preds_path),
        ])
        empty = tmp_path / "empty.txt"
        empty.write_text("")
        rc = main([
            "eval", "--preds", str(preds_path),
            "--labels", str(toy_files["labels"]), "--split", str(empty),
        ])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestConfigPrecedence:
    def test_defaults_config_flags_order(self, tmp_path, capsys):
        cfg = tmp_path / "run.conf"
        cfg.write_text("lambda-max = 0.7\ntau = 0.25\n")
        main([
            "train", "--graph", "unused", "--model", "unused",
            "--config", str(cfg), "--tau", "0.9", "--print-config",
        ])
        out = dict(
            line.split(" = ") for line in capsys.readouterr().out.splitlines()
        )
        assert out["lambda-max"] == "0.7"   # config file beats defaults
        assert out["tau"] == "0.9"          # flag beats config file
        assert out["delta"] == "0.5"        # untouched default

    def test_unknown_config_key_is_hard_error(self, tmp_path, capsys):
        cfg = tmp_path / "run.conf"
        cfg.write_text("lamda-max = 0.7\n")
        rc = main([
            "train", "--graph", "unused", "--model", "unused",
            "--config", str(cfg), "--print-config",
        ])
        assert rc == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_preset_is_overridable(self, capsys):
        main([
            "train", "--graph", "unused", "--model", "unused",
            "--preset", "cora-ppr", "-k", "64", "--print-config",
        ])
        out = dict(
            line.split(" = ") for line in capsys.readouterr().out.splitlines()
        )
        assert out["k"] == "64"
        assert out["N"] == "20"
        assert out["scheme"] == "ppr"

    def test_unknown_preset_fails(self, capsys):
        rc = main([
            "train", "--graph", "unused", "--model", "unused",
            "--preset", "bogus", "--print-config",
        ])
        assert rc == 1


class TestSweep:
    def test_single_point_grid(self, toy_files, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        rc = main([
            "sweep", "--graph", str(toy_files["graph"]),
            "--features", str(toy_files["features"]),
            "--labels", str(toy_files["labels"]),
            "--train-split", str(toy_files["train"]),
            "--valid-split", str(toy_files["valid"]),
            "--test-split", str(toy_files["test"]),
            *TOY_HYPERS,
            "--sweep-k", "6", "--sweep-seeds", "0", "--out", str(out),
        ])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "k,r_max,N,lambda_max,gamma,mean_accuracy,mean_runtime_s"
        assert len(lines) == 2
        acc = float(lines[1].split(",")[5])
        assert 0.0 <= acc <= 1.0

    def test_empty_grid_is_usage_error(self, toy_files):
        with pytest.raises(SystemExit) as exc:
            main([
                "sweep", "--graph", str(toy_files["graph"]),
                "--features", str(toy_files["features"]),
                "--labels", str(toy_files["labels"]),
                "--train-split", str(toy_files["train"]),
                "--test-split", str(toy_files["test"]),
            ])
        assert exc.value.code == 2

    def test_accuracy_non_decreasing_as_rmax_tightens(self, tmp_path, capsys):
        # two cliques joined by a bridge; features are one-hot node ids, so
        # classification requires neighborhood mixing: a loose r_max leaves
        # panel rows nearly empty and accuracy at chance, a tight r_max
        # recovers the clique structure
        edges = []
        for base in (0, 5):
            for i in range(5):
                for j in range(i + 1, 5):
                    edges.append((base + i, base + j))
        edges.append((4, 5))
        graph = build_csr(edges, 10)
        paths = {
            "graph": tmp_path / "g.tsv", "features": tmp_path / "f.txt",
            "labels": tmp_path / "l.txt", "train": tmp_path / "tr.txt",
            "valid": tmp_path / "va.txt", "test": tmp_path / "te.txt",
        }
        save_edge_list(paths["graph"], graph)
        save_sparse_features(paths["features"], FeatureMatrix(np.eye(10)))
        paths["labels"].write_text(
            "".join(f"{i} {0 if i < 5 else 1}\n" for i in range(10))
        )
        paths["train"].write_text("0\n5\n")
        paths["valid"].write_text("1\n6\n")
        paths["test"].write_text("2\n3\n4\n7\n8\n9\n")
        out = tmp_path / "sweep.csv"
        rc = main([
            "sweep", "--graph", str(paths["graph"]),
            "--features", str(paths["features"]),
            "--labels", str(paths["labels"]),
            "--train-split", str(paths["train"]),
            "--valid-split", str(paths["valid"]),
            "--test-split", str(paths["test"]),
            "--scheme", "avg", "-N", "2", "-k", "10",
            "--bl", "2", "--bu", "4", "--hidden", "8", "--max-steps", "60",
            "--eval-every", "5", "--patience", "100", "--warmup", "10",
            "--no-normalize-features", "--workers", "1", "--delta", "0.1",
            "--sweep-rmax", "1e-1,1e-3,1e-6", "--sweep-seeds", "0",
            "--out", str(out),
        ])
        assert rc == 0
        rows = [line.split(",") for line in out.read_text().strip().splitlines()[1:]]
        accs = {float(r[1]): float(r[5]) for r in rows}
        assert accs[1e-3] >= accs[1e-1] - 1e-9
        assert accs[1e-6] >= accs[1e-3] - 1e-9
        assert accs[1e-6] == 1.0
