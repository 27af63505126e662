"""Smoke test for the festa Python bindings.

Build and install first:
    pip install maturin
    pip install --no-build-isolation -e crates/python
"""

import json

import festa


def main() -> None:
    table = {(task, method): total for task, method, _, _, total in festa.cost_table(100)}
    assert abs(table[("classification", "FeSTA")] - 105.580) < 0.01
    assert abs(table[("detection", "Federated learning")] - 226.450) < 0.01

    fg, params, total = festa.closed_form_cost("festa", 1.0, 2.0, 3.0, 0.5, 0.5, 10)
    assert (fg, params, total) == (10.0, 8.0, 18.0)

    avg = festa.fedavg([[1.0, 2.0], [3.0, 4.0]])
    assert avg == [2.0, 3.0]
    assert festa.fedavg([[1.0, 2.0], [3.0, 4.0]]) == festa.fedavg([[3.0, 4.0], [1.0, 2.0]])

    assert festa.auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75
    assert festa.dice([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5
    box = (1.0, 1.0, 4.0, 4.0)
    assert festa.mean_average_precision([(0, box, 0.9)], [[box]]) == 1.0

    try:
        festa.Config().with_overrides(k_avg=0).validate()
    except ValueError as e:
        assert "k_avg" in str(e)
    else:
        raise AssertionError("k_avg=0 accepted")

    cfg = festa.Config().with_overrides(
        strategy="festa-stl", tasks=["classification"], clients=2, rounds=20, k_avg=5
    )
    cfg.validate()
    rec = festa.run_seed(cfg, 0)
    assert rec.cost_matches(), "ledger differs from the closed form"
    (task, metric, accuracy), = rec.metrics()
    assert task == "classification" and 0.0 <= metric <= 1.0 and accuracy is not None
    again = festa.run_seed(cfg, 0)
    assert again.metrics() == rec.metrics(), "runs are not deterministic"
    assert json.loads(rec.to_json())["config_hash"] == cfg.hash()
    print(festa.report([rec, festa.run_seed(cfg, 1)]))

    variants = [v for v, _ in festa.Config.preset("table5-ablation")]
    assert variants == ["k_avg=1", "k_avg=10", "k_avg=100"], variants
    print("python smoke: ok")


if __name__ == "__main__":
    main()
