"""Fine-tune a transferred student under each freeze preset and report
loss drop and registration quality.

    python scripts/freeze_ablation.py --test-pairs 20
"""
import argparse
import json

from dbenet.experiments import ExperimentConfig, benchmark, dataset, pretrain, train_student
from dbenet.training import FREEZE_PRESETS


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--master-seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--test-pairs", type=int, default=20)
    ap.add_argument("--presets", nargs="+", default=list(FREEZE_PRESETS))
    ap.add_argument("--out")
    a = ap.parse_args()
    cfg = ExperimentConfig(master_seed=a.master_seed, epochs=a.epochs, test_pairs=a.test_pairs)
    teacher, _ = pretrain(cfg)
    test = dataset(cfg, "test_data", cfg.test_pairs)
    rows = {}
    for preset in a.presets:
        model, s = train_student(cfg, teacher, freeze=preset, label=preset)
        s.report = benchmark(model, test, cfg.seeds()["ransac"], cfg.ransac_iterations).aggregates
        rows[preset] = {"drop": s.drop, "history": s.history, "report": s.report, "seconds": s.seconds}
        print(f"{preset:12s} drop={100 * s.drop:5.1f}%  FMR={s.report['FMR']:5.1f}%  RR={s.report['RR']:5.1f}%  "
              f"{s.seconds:.0f}s")
    if a.out:
        with open(a.out, "w") as f:
            json.dump(rows, f, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
