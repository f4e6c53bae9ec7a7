import csv
import json

import pytest

from active_teacher.cli import build_parser, main
from active_teacher.config import load_config
from active_teacher.toy import SyntheticDataset

TINY_INI = """\
[data]
grid = 4
dim = 12
num_classes = 3
max_objects = 3
n_scenes = 40

[train]
pretrain_steps = 15
total_steps = 15
batch_labeled = 4
batch_unlabeled = 4

[experiment]
budget_fractions = 0.1, 0.2
n_test = 20
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def score_args(fixtures_dir, out, *extra):
    return ["score", "--predictions", str(fixtures_dir / "predictions.json"),
            "--categories", str(fixtures_dir / "categories.json"), "--out", str(out), *extra]


@pytest.mark.parametrize("strategy", ["autonorm", "difficulty", "information", "diversity"])
def test_score_fixture_matches_hand_derivation(fixtures_dir, tmp_path, strategy):
    out = tmp_path / "scores.csv"
    assert main(score_args(fixtures_dir, out, "--strategy", strategy)) == 0
    assert out.read_text() == (fixtures_dir / f"expected_{strategy}.csv").read_text()


def test_score_is_deterministic_json(fixtures_dir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(score_args(fixtures_dir, a))
    main(score_args(fixtures_dir, b))
    assert a.read_bytes() == b.read_bytes()
    assert [r["image_id"] for r in json.loads(a.read_text())["selection"]] == [1, 2, 3]


def test_single_category_diversity_ties_follow_id_order(tmp_path):
    cats = tmp_path / "cats.json"
    cats.write_text(json.dumps([{"id": 5, "name": "a"}, {"id": 6, "name": "b"}]))
    recs = [{"image_id": i, "category_id": 5, "bbox": [i, 0, 1, 1], "score": 0.9, "probs": [0.9, 0.1]} for i in (30, 10, 20)]
    preds = tmp_path / "preds.json"
    preds.write_text(json.dumps(recs))
    out = tmp_path / "s.csv"
    assert main(["score", "--predictions", str(preds), "--categories", str(cats), "--strategy", "diversity", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["image_id"] for r in rows] == ["10", "20", "30"]
    assert len({r["combined"] for r in rows}) == 1


def test_empty_policy_flag_moves_empty_images_up(fixtures_dir, tmp_path):
    out = tmp_path / "s.csv"
    main(score_args(fixtures_dir, out, "--empty-policy", "max"))
    assert next(csv.DictReader(out.open()))["image_id"] == "3"


def test_missing_file_exits_2_naming_path(fixtures_dir, tmp_path, capsys):
    code = main(["score", "--predictions", str(tmp_path / "ghost.json"), "--categories",
                 str(fixtures_dir / "categories.json"), "--out", str(tmp_path / "o.csv")])
    assert code == 2
    assert "ghost.json" in capsys.readouterr().err


def test_malformed_record_exits_2(fixtures_dir, tmp_path, capsys):
    preds = tmp_path / "p.json"
    preds.write_text(json.dumps([{"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1], "score": 0.5, "probs": [0.5, 0.4, 0.0]}]))
    code = main(["score", "--predictions", str(preds), "--categories", str(fixtures_dir / "categories.json"),
                 "--out", str(tmp_path / "o.csv")])
    assert code == 2 and "record 0" in capsys.readouterr().err


def test_select_top_n(fixtures_dir, tmp_path):
    scores = tmp_path / "scores.csv"
    main(score_args(fixtures_dir, scores, "--strategy", "information"))
    out = tmp_path / "pick.csv"
    assert main(["select", "--scores", str(scores), "--n", "2", "--strategy", "information", "--out", str(out)]) == 0
    assert [r["image_id"] for r in csv.DictReader(out.open())] == ["2", "1"]
    again = tmp_path / "pick2.csv"
    main(["select", "--scores", str(scores), "--n", "2", "--strategy", "information", "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_select_random_is_seeded(fixtures_dir, tmp_path):
    scores = tmp_path / "scores.csv"
    main(score_args(fixtures_dir, scores))
    outs = []
    for name in ("a.csv", "b.csv"):
        main(["select", "--scores", str(scores), "--n", "2", "--strategy", "random", "--seed", "4", "--out", str(tmp_path / name)])
        outs.append((tmp_path / name).read_text())
    assert outs[0] == outs[1]


def test_select_more_than_available_exits_1(fixtures_dir, tmp_path):
    scores = tmp_path / "scores.csv"
    main(score_args(fixtures_dir, scores))
    assert main(["select", "--scores", str(scores), "--n", "4", "--out", str(tmp_path / "x.csv")]) == 1


def test_simulate_determinism_and_layout(tiny_config, tmp_path):
    runs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["simulate", "--config", str(tiny_config), "--strategy", "random", "--seeds", "1", "--out", str(out)]) == 0
        runs.append(out)
    for rel in ("summary.csv", "random/seed1/selection.jsonl", "random/seed1/history.csv"):
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes()
    rows = list(csv.DictReader((runs[0] / "summary.csv").open()))
    assert list(rows[0]) == ["strategy", "seed", "final_ap", "labeled_images", "labeled_objects"]
    assert rows[0]["labeled_images"] == "8"
    log = [json.loads(line) for line in (runs[0] / "random/seed1/selection.jsonl").read_text().splitlines()]
    assert len(log) == 8 and {r["iteration"] for r in log} == {0, 1}
    assert load_config(runs[0] / "config.ini") == load_config(tiny_config)


def test_simulate_ablate_rows(tiny_config, tmp_path):
    out = tmp_path / "abl"
    assert main(["simulate", "--config", str(tiny_config), "--ablate", "--seeds", "0,1", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert len(rows) == 5 * 2
    assert {r["strategy"] for r in rows} == {"difficulty", "information", "diversity", "autonorm", "random"}


def test_simulate_figures_and_report(tiny_config, tmp_path):
    out = tmp_path / "fig"
    assert main(["simulate", "--config", str(tiny_config), "--seeds", "0", "--figures", "--out", str(out)]) == 0
    pngs = sorted(p.name for p in (out / "figures").glob("*.png"))
    assert pngs == ["final_ap.png", "labeled_objects.png", "loss_curves.png"]
    for p in (out / "figures").glob("*.png"):
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        p.unlink()
    assert main(["report", "--run", str(out)]) == 0
    assert len(list((out / "figures").glob("*.png"))) == 3
    assert main(["report", "--run", str(tmp_path / "nowhere")]) == 2


def test_simulate_overrides_and_budget_error(tiny_config, tmp_path):
    out = tmp_path / "o"
    args = ["simulate", "--config", str(tiny_config), "--seeds", "0", "--out", str(out)]
    assert main(args + ["--budgets", "0.1,0.2,0.3", "--total-steps", "5"]) == 0
    assert load_config(out / "config.ini").train.k_iterations == 3
    assert main(args + ["--budgets", "0.5,1.5"]) == 1
    assert main(args + ["--k-iterations", "3"]) == 2


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--seeds", "a,b", "--out", "x"],
        ["simulate", "--seeds", "1,1", "--out", "x"],
        ["simulate", "--ablate", "--strategy", "random", "--out", "x"],
        ["simulate", "--jobs", "0", "--out", "x"],
        ["score", "--predictions", "p", "--categories", "c", "--out", "o", "--tau", "2"],
        ["score", "--predictions", "p", "--categories", "c", "--out", "o", "--p", "0.5"],
        ["select", "--scores", "s", "--n", "-1", "--out", "o"],
        ["select", "--scores", "s", "--out", "o"],
        [],
    ],
)
def test_invalid_flags_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_help_names_every_method_symbol():
    sub = build_parser()._subparsers._group_actions[0].choices
    simulate_help = sub["simulate"].format_help()
    for symbol in ("lambda", "alpha", "tau", "K,", "p,"):
        assert symbol in simulate_help
    for name in ("score", "select"):
        text = sub[name].format_help()
        assert "p, order" in text
    assert "tau" in sub["score"].format_help()


def test_make_config_and_dataset(tiny_config, tmp_path, capsys):
    assert main(["make-config"]) == 0
    assert "[train]" in capsys.readouterr().out
    out = tmp_path / "c.ini"
    assert main(["make-config", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert load_config(out) == load_config(tiny_config)
    ds_path = tmp_path / "ds.json"
    assert main(["dataset", "--config", str(tiny_config), "--n", "5", "--seed", "2", "--out", str(ds_path)]) == 0
    assert len(SyntheticDataset.load(ds_path)) == 5


def test_parallel_workers_do_not_change_outputs(tiny_config, tmp_path):
    serial, parallel = tmp_path / "s", tmp_path / "p"
    base = ["simulate", "--config", str(tiny_config), "--seeds", "0,1", "--strategy", "diversity"]
    assert main(base + ["--out", str(serial)]) == 0
    assert main(base + ["--jobs", "2", "--out", str(parallel)]) == 0
    for rel in ("summary.csv", "diversity/seed0/selection.jsonl", "diversity/seed1/history.csv"):
        assert (serial / rel).read_bytes() == (parallel / rel).read_bytes()
