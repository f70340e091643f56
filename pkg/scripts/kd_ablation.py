"""Compare fine-tuning without distillation against the KL and L1 variants.

    python scripts/kd_ablation.py --temperature 2 --weight 1
"""
import argparse
import json

from dbenet.experiments import ExperimentConfig, benchmark, dataset, pretrain, train_student
from dbenet.training import KDConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--master-seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--test-pairs", type=int, default=20)
    ap.add_argument("--temperature", type=float, default=1.0)
    ap.add_argument("--weight", type=float, default=1.0)
    ap.add_argument("--out")
    a = ap.parse_args()
    cfg = ExperimentConfig(master_seed=a.master_seed, epochs=a.epochs, test_pairs=a.test_pairs)
    teacher, _ = pretrain(cfg)
    test = dataset(cfg, "test_data", cfg.test_pairs)
    variants = {"off": None, "kl": KDConfig(a.temperature, "kl", a.weight),
                "l1": KDConfig(a.temperature, "l1", a.weight)}
    rows = {}
    for name, kd in variants.items():
        model, s = train_student(cfg, teacher, kd=kd, label=name)
        s.report = benchmark(model, test, cfg.seeds()["ransac"], cfg.ransac_iterations).aggregates
        rows[name] = {"history": s.history, "report": s.report}
        print(f"kd={name:4s} loss {s.history[0]:.3f} -> {s.history[-1]:.3f}  FMR={s.report['FMR']:5.1f}%  "
              f"RR={s.report['RR']:5.1f}%")
    if a.out:
        with open(a.out, "w") as f:
            json.dump(rows, f, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
