"""Smoke test of the attnlab Python module.

Build the extension first, either with `maturin develop -m crates/python/pyproject.toml`
or with

    cargo build --release -p attnlab-python --features extension-module
    cp target/release/libattnlab_py.so python/attnlab.so

and then run `python3 python/smoke_test.py`.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import attnlab  # noqa: E402


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    plan = attnlab.InsertionPlan("cnl@6,8,14")
    check(plan.positions() == [6, 8, 14], "plan parses")

    ds = attnlab.Dataset.synthetic(n_train_ids=8, n_test_ids=8, imgs_per_id=6, seed=3)
    check(ds.counts()["train"] == 48, "synthetic dataset")

    cfg = attnlab.BackboneConfig(num_classes=ds.num_train_ids)
    model = attnlab.Model(plan, cfg, seed=0)
    base = attnlab.Model(None, cfg, seed=0)

    macs = attnlab.count_macs(model)["total_macs"]
    base_macs = attnlab.count_macs(base)["total_macs"]
    check(base_macs < macs < 1.01 * base_macs, "three CNL blocks add under 1% MACs")

    bench = attnlab.benchmark_latency(model, batch_size=2, warmup=0, iters=2)
    check(bench["batches_per_second"] > 0, "latency benchmark")

    log = attnlab.train(
        model,
        ds,
        {"epochs": 2, "warmup_epochs": 0, "lr_milestones": [], "p_ids": 4, "k_instances": 2},
    )
    check(all(math.isfinite(e["loss"]) for e in log["epochs"]), "training losses finite")

    result = attnlab.evaluate(model, ds)
    check(0.0 <= result["mAP"] <= 1.0, f"evaluate mAP={result['mAP']:.4f}")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        again = attnlab.Model.load(path)
        check(attnlab.evaluate(again, ds)["mAP"] == result["mAP"], "checkpoint round trip")

    target = attnlab.Dataset.synthetic(n_train_ids=6, n_test_ids=6, imgs_per_id=6, seed=11)
    ft = attnlab.finetune_two_step(
        model,
        target,
        {"epochs": 1, "warmup_epochs": 0, "lr_milestones": [], "p_ids": 3, "k_instances": 2},
        {"epochs": 1, "warmup_epochs": 0, "lr_milestones": [], "p_ids": 3, "k_instances": 2},
    )
    check(set(ft) == {"classifier_step", "full_step"}, "two-step finetune")

    loss = attnlab.circle_loss([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]], [0, 0, 1], gamma=32.0)
    check(math.isfinite(loss) and loss > 0, "circle loss")

    r = attnlab.evaluate_distances([[0.1, 0.9], [0.8, 0.2]], [1, 2], [0, 0], [1, 2], [1, 1])
    check(r["mAP"] == 1.0, "evaluate from distances")

    header = (
        "schema_version,key,plan,anchor,loss,seeds,map_runs,map_mean,map_std,"
        "rank1_mean,macs,params,batches_per_sec,ms_per_batch,config_id\n"
    )
    rows = "".join(
        f"1,{p}|ce_ls,{p},,ce_ls,0,{m},{m},0,{m},{macs},1000,{s},{1000 / s},{p}\n"
        for p, m, s in [("nl@2", 0.41, 9.0), ("nl@9", 0.45, 10.0), ("cnl@14", 0.47, 11.0)]
    )
    report = attnlab.rules_report(header + rows)
    check(len(report["points"]) == 3, "rules report")

    svg = attnlab.scatter_svg(header + rows, title="smoke")
    check("<svg" in svg and "smoke" in svg, "scatter plot")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
