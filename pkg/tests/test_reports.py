import json

import pytest

from relamix import reports as R
from relamix.trainer import EvalReport


def _rep(model="relamix", ablation="full", ratio=0.25, k=1, seed=0, mse=0.5, params=100, r2=0.25):
    return EvalReport(
        model=model, ablation=ablation, delay_ratio=ratio, k=k, mse=mse, mae=0.4, r2=r2,
        params=params, epochs=3, seed=seed, mask_hash="ab", config_hash="cd",
        per_feature=[{"mse": mse, "mae": 0.4, "r2": r2}], wall_time=1.25,
    )


def test_csv_round_trip():
    reps = [_rep(), _rep(k=5, mse=0.1 + 0.2, r2=None), _rep(model="linear", ablation="none")]
    back = R.from_csv(R.to_csv(reps))
    assert [r.to_dict() for r in back] == [r.to_dict() for r in R.sort_reports(reps)]


def test_json_drops_wall_time():
    doc = json.loads(R.to_json([_rep()], drop_wall_time=True))
    assert "wall_time" not in doc[0] and doc[0]["mse"] == 0.5


def test_sorting_is_order_independent():
    reps = [_rep(ratio=r, k=k, seed=s) for r in (0.35, 0.15) for k in (5, 1) for s in (1, 0)]
    assert R.to_json(reps) == R.to_json(list(reversed(reps)))


def test_load_reports(tmp_path):
    assert R.load_reports(tmp_path) == []
    R.write_cell(_rep(), tmp_path)
    (tmp_path / "bundle.json").write_text(R.to_json([_rep(k=5), _rep(k=7)]))
    (tmp_path / "manifest.json").write_text(json.dumps({"tool": "relamix"}))
    assert sorted(r.k for r in R.load_reports(tmp_path)) == [1, 5, 7]
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(R.ReportFileError, match="broken.json"):
        R.load_reports(tmp_path)
    with pytest.raises(R.ReportFileError):
        R.load_reports(tmp_path / "missing")


def test_table_layout_and_seed_spread():
    reps = [_rep(k=k, params=11949 + 165 * (k - 1), seed=s, mse=0.5 + 0.1 * s) for k in (1, 5) for s in (0, 1)]
    reps.append(_rep(model="persistence", ablation="none", k=1, params=0, mse=0.9))
    table = R.render_table(reps)
    lines = table.splitlines()
    assert "25% k=1" in lines[0] and "25% k=5" in lines[0]
    top = next(i for i, l in enumerate(lines) if l.startswith("relamix"))
    assert lines[top + 3].split() == ["Params", "11949", "12609"]
    assert "0.55000±0.07071" in table
    pers = next(l for l in lines if l.startswith("persistence"))
    assert pers.split()[-1] == "-"
    assert "\x1b[" not in table


def test_table_color_marks_best():
    reps = [_rep(mse=0.3), _rep(model="linear", ablation="none", mse=0.2)]
    colored = R.render_table(reps, color=True)
    best = [l for l in colored.splitlines() if "\x1b[1m" in l]
    assert len(best) == 1 and best[0].startswith("linear")
    assert R.render_table([]) == "(no reports)\n"
