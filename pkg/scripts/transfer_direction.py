"""Registration recall of a transfer+freeze student against a scratch student.

    python scripts/transfer_direction.py --master-seed 0 --out transfer_direction.json
"""
import argparse
import json

from dbenet.experiments import ExperimentConfig, transfer_direction


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--master-seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--teacher-epochs", type=int, default=10)
    ap.add_argument("--test-pairs", type=int, default=50)
    ap.add_argument("--freeze", default="enc+dec")
    ap.add_argument("--out")
    a = ap.parse_args()
    cfg = ExperimentConfig(master_seed=a.master_seed, epochs=a.epochs, teacher_epochs=a.teacher_epochs,
                           test_pairs=a.test_pairs, freeze=a.freeze)
    res = transfer_direction(cfg)
    for k in ("transfer", "scratch"):
        r = res[k]
        print(f"{k:9s} RR={r['report']['RR']:5.1f}%  FMR={r['report']['FMR']:5.1f}%  "
              f"loss {r['history'][0]:.3f} -> {r['history'][-1]:.3f}")
    if a.out:
        with open(a.out, "w") as f:
            json.dump(res, f, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
