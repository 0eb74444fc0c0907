"""Smoke test for the sendtime_py extension module.

Build and install first, e.g.
    pip install maturin && maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/sendtime_py-*.whl
"""

import json
import math
import random
import tempfile
from pathlib import Path

import sendtime_py as st


def check_losses():
    nll = st.efron_nll([2.0, 1.0, 1.0, 1.0], [1.0, 1.0, 2.0, 3.0], [True, True, True, False])
    hand = -(math.log(2) - math.log(5) - math.log(3.5) - math.log(2))
    assert abs(nll - hand) < 1e-12, nll
    grad = st.efron_nll_gradient([2.0, 1.0, 1.0, 1.0], [1.0, 1.0, 2.0, 3.0], [True, True, True, False])
    assert abs(sum(grad)) < 1e-12
    assert st.c_index([3.0, 2.0, 1.0], [1.0, 2.0, 3.0], [True, True, True]) == 1.0
    assert st.c_index([1.0, 1.0, 1.0], [1.0, 2.0, 3.0], [True, True, True]) == 0.5
    assert abs(st.weibull_survival(2.0, 0.5, 2.0) - math.exp(-2.0)) < 1e-12
    try:
        st.efron_nll([1.0], [1.0], [False])
    except st.SendtimeError as e:
        assert "event" in str(e)
    else:
        raise AssertionError("expected SendtimeError")


def check_bins():
    rng = random.Random(0)
    sends = [1_704_067_200 + rng.randrange(0, 20 * 7 * 86400) for _ in range(5000)]
    scheme = st.BinScheme.fit(sends, 100)
    counts = [0] * len(scheme)
    for t in sends:
        counts[scheme.bin_of(t)] += 1
    assert max(counts) - min(counts) <= 1, (min(counts), max(counts))


def check_models():
    rng = random.Random(1)
    x, d, e = [], [], []
    for _ in range(2000):
        row = [rng.gauss(0, 1), rng.gauss(0, 1)]
        phi = math.exp(1.0 * row[0] - 0.5 * row[1])
        t = rng.expovariate(phi)
        x.append(row)
        d.append(min(t, 1.0))
        e.append(t <= 1.0)
    cox = st.fit_cox_linear_model(x, d, e)
    assert cox.kind == "cph_l"
    assert cox.concordance(x, d, e) > 0.65
    weibull = st.fit_weibull_model(x, d, e)
    assert weibull.score(x[0]) > 0
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "cox.json"
        cox.save(str(path), seq_len=4)
        back = st.Model.load(str(path))
        assert back.kind == "cph_l" and back.seq_len == 4
        assert back.score(x[0]) == cox.score(x[0])


def check_pipeline():
    config = {
        "data": {"kind": "synth", "spec": {"n_recipients": 150, "messages_per_recipient": 20, "seed": 3}},
        "windows_hours": [12],
        "sequence_lengths": [4],
        "models": ["cph_l", "rnn_s"],
        "bins": 20,
        "filter": {"min_bulk_size": 1},
        "hidden": 6,
        "rnn": {"epochs": 3},
        "report": {"model": "cph_l", "seq_len": 4, "score_prefix": 14, "k": 5},
        "seed": 3,
    }
    grid = st.experiment(json.dumps(config))
    assert {c["model"] for c in grid["cells"]} == {"cph_l", "rnn_s"}
    assert all(c["c_index"] is not None for c in grid["cells"])
    report = st.pipeline(json.dumps(config))
    assert report["topk"]["k"] == 5
    assert sum(d["emails_sent"] for d in report["deciles"]["deciles"]) > 0
    with tempfile.TemporaryDirectory() as tmp:
        summary = st.synth(tmp, json.dumps({"n_recipients": 20}), seed=2)
        assert summary["messages"] == 20 * 24
        assert (Path(tmp) / "emails.csv").exists()
    try:
        st.experiment(json.dumps({**config, "models": ["nope"]}))
    except st.SendtimeError as e:
        assert "nope" in str(e)
    else:
        raise AssertionError("expected SendtimeError")


if __name__ == "__main__":
    print("sendtime_py", st.__version__, "models:", ", ".join(st.model_kinds()))
    for check in (check_losses, check_bins, check_models, check_pipeline):
        check()
        print("ok", check.__name__)
