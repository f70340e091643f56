"""End-to-end run of the command-line pipeline on a small synthetic set:
generate pairs, pretrain the teacher, transfer, fine-tune, register, evaluate.

    python scripts/pipeline_demo.py --workdir demo_out
"""
import argparse
from pathlib import Path

from dbenet.cli import main as dbenet
from dbenet.data import read_manifest


def step(*argv):
    argv = [str(a) for a in argv]
    print("$ dbenet " + " ".join(argv), flush=True)
    code = dbenet(argv)
    if code not in (0, 6):
        raise SystemExit(code)


def run():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", default="demo_out")
    ap.add_argument("--pairs", type=int, default=6)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    w = Path(a.workdir)
    train, test = w / "train", w / "test"
    step("gen-synth", "--pairs", a.pairs, "--seed", a.seed, "--out", train)
    step("gen-synth", "--pairs", a.pairs, "--seed", a.seed + 1, "--out", test)
    step("pretrain-teacher", "--data", train, "--epochs", a.epochs, "--lr", 1e-3, "--seed", a.seed,
         "--out", w / "teacher.dbec")
    step("transfer", "--teacher", w / "teacher.dbec", "--out", w / "student_init.dbec")
    step("finetune", "--data", train, "--init", w / "student_init.dbec", "--freeze", "enc+dec", "--kd", "kl",
         "--teacher", w / "teacher.dbec", "--epochs", a.epochs, "--lr", 1e-3, "--seed", a.seed,
         "--out", w / "student.dbec")
    e = read_manifest(test / "manifest.jsonl")[0]
    step("register", "--src", test / e.src, "--dst", test / e.dst, "--ckpt", w / "student.dbec")
    step("evaluate", "--manifest", test / "manifest.jsonl", "--ckpt", w / "student.dbec", "--out", w / "report.txt")


if __name__ == "__main__":
    run()
