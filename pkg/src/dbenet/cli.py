"""``dbenet`` command-line entry point.

Exit codes: 0 ok, 1 check failure, 2 configuration error, 3 generation error,
4 checkpoint / file-format / I/O error, 5 training error, 6 registration
failure. Settings resolve as flags > JSON config file > built-in defaults;
the resolved settings are written next to every output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (DBENetError, EmptyPositivesError, FormatError, GenerationError, InvalidArgument,
                     TransferError)

OUT_ENV = "DBENET_OUT"

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_GEN, EXIT_IO, EXIT_TRAIN, EXIT_REG = 0, 1, 2, 3, 4, 5, 6

log = logging.getLogger("dbenet")


class ConfigError(Exception):
    pass


class CommandError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# built-in defaults per command; every key can also come from --config or a flag
DEFAULTS = {
    "gen-synth": {"preset": "match", "pairs": 10, "seed": 0, "points_per_fragment": 2048,
                  "noise": 0.005, "crop_radius": None},
    "pretrain-teacher": {"epochs": 10, "seed": 0, "lr": 0.1, "batch_size": 2, "model": "desk",
                         "voxel_size": 0.05},
    "transfer": {"scope": "sfcn.encoder,sfcn.decoder", "seed": 0},
    "finetune": {"epochs": 10, "seed": 0, "lr": 0.1, "batch_size": 2, "freeze": "enc+dec", "kd": "off",
                 "kd_temperature": 1.0, "kd_weight": 1.0},
    "register": {"seed": 0, "mode": "mutual", "epsilon": None, "max_iterations": 50000},
    "evaluate": {"seed": 0, "mode": "mutual", "epsilon": None, "max_iterations": 50000},
    "gradcheck": {"scope": "all", "seed": 0},
    "selftest": {"seed": 0},
}


def _default_out(name: str) -> str:
    return str(Path(os.environ.get(OUT_ENV, "dbenet_out")) / name)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbenet", description="Dual-branch ensemble descriptors for registration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON file of settings (overridden by flags)")
        s.add_argument("--seed", type=int)
        return s

    s = cmd("gen-synth", "generate synthetic fragment pairs and a manifest")
    s.add_argument("--preset")
    s.add_argument("--pairs", type=int)
    s.add_argument("--points-per-fragment", dest="points_per_fragment", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--crop-radius", dest="crop_radius", type=float)
    s.add_argument("--out")

    for name, help_ in (("pretrain-teacher", "train the dual-modality teacher"),
                        ("finetune", "fine-tune the student with frozen transferred parts")):
        s = cmd(name, help_)
        s.add_argument("--data", required=False, help="directory with manifest.jsonl, or a manifest path")
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--batch-size", dest="batch_size", type=int)
        s.add_argument("--out")
        if name == "pretrain-teacher":
            s.add_argument("--model", choices=("desk", "full", "tiny"))
            s.add_argument("--voxel-size", dest="voxel_size", type=float)
        else:
            s.add_argument("--init", help="student checkpoint to start from")
            s.add_argument("--freeze", help="enc | enc+att | enc+att+dec | enc+dec | none, or prefixes")
            s.add_argument("--kd", choices=("kl", "l1", "off"))
            s.add_argument("--teacher", help="teacher checkpoint (needed with --kd)")
            s.add_argument("--kd-temperature", dest="kd_temperature", type=float)
            s.add_argument("--kd-weight", dest="kd_weight", type=float)
            # test hook: scales one backward rule to prove failures surface
            s.add_argument("--perturb-backward", dest="perturb_backward", help=argparse.SUPPRESS)

    s = cmd("transfer", "copy teacher tensors into a fresh student")
    s.add_argument("--teacher")
    s.add_argument("--scope", help="comma list of sfcn.encoder, sfcn.decoder, attention")
    s.add_argument("--out")

    s = cmd("register", "register two PLY clouds")
    s.add_argument("--src")
    s.add_argument("--dst")
    s.add_argument("--ckpt")
    s.add_argument("--mode", choices=("mutual", "nearest"))
    s.add_argument("--epsilon", type=float)
    s.add_argument("--max-iterations", dest="max_iterations", type=int)

    s = cmd("evaluate", "benchmark a checkpoint on a manifest")
    s.add_argument("--manifest")
    s.add_argument("--ckpt")
    s.add_argument("--out", help="report path; records go to <out>.jsonl")
    s.add_argument("--mode", choices=("mutual", "nearest"))
    s.add_argument("--epsilon", type=float)
    s.add_argument("--max-iterations", dest="max_iterations", type=int)

    s = cmd("gradcheck", "finite-difference gradient checks")
    s.add_argument("--scope", help="all, ops, layers, network, or one check name")
    s.add_argument("--perturb-backward", dest="perturb_backward", help=argparse.SUPPRESS)

    cmd("selftest", "oracle-equivalence suite plus gradcheck")
    return p


_NOT_SETTINGS = {"command", "config", "verbose", "perturb_backward"}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the JSON config file and explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_SETTINGS}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(flags) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
        cfg.update(file_cfg)
    for k, v in flags.items():
        if v is not None or k not in cfg:
            cfg[k] = v
    cfg["command"] = args.command
    return cfg


def _write_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _need(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / "manifest.jsonl" if p.is_dir() else p


def _load_ckpt(path):
    from .data import load_checkpoint

    try:
        ck = load_checkpoint(path)
    except OSError as e:
        raise CommandError(EXIT_IO, f"cannot read checkpoint {path}: {e}") from None
    if not ck.ok:
        raise CommandError(EXIT_IO, f"checkpoint {path} failed CRC check for: {', '.join(ck.integrity_failures)}")
    return ck


def _load_pairs(data):
    from .data import load_pairs

    path = _manifest_path(data)
    try:
        return load_pairs(path)
    except OSError as e:
        raise CommandError(EXIT_IO, f"cannot read dataset {path}: {e}") from None


def _model_config(cfg):
    from .fusion import desk_scale, full_scale, tiny

    make = {"desk": desk_scale, "full": full_scale, "tiny": tiny}.get(cfg["model"])
    if make is None:
        raise ConfigError(f"unknown model preset {cfg['model']!r}")
    v = float(cfg["voxel_size"])
    if not v > 0:
        raise ConfigError("voxel_size must be positive")
    return make(v)


def _optim(cfg):
    from .training import OptimConfig

    if not cfg["lr"] > 0 or cfg["batch_size"] < 1 or cfg["epochs"] < 0:
        raise ConfigError("need lr > 0, batch_size >= 1 and epochs >= 0")
    return OptimConfig(lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]))


def _history(res) -> dict:
    return {"history": [h if np.isfinite(h) else None for h in res.history], "skipped": res.skipped}


def _record_writer(path: Path):
    f = open(path, "w", encoding="utf-8")

    def write(rec):
        f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return f, write


# ---------------------------------------------------------------- commands

def cmd_gen_synth(cfg) -> int:
    from .data import ManifestEntry, write_manifest, write_ply
    from .synth import PRESETS, make_dataset

    if cfg["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {cfg['preset']!r}; choose from {sorted(PRESETS)}")
    if cfg["pairs"] < 0:
        raise ConfigError("--pairs must be >= 0")
    out = Path(cfg.get("out") or _default_out("synth"))
    overrides = {"points_per_fragment": int(cfg["points_per_fragment"]), "noise": float(cfg["noise"])}
    if cfg.get("crop_radius") is not None:
        overrides["crop_radius"] = float(cfg["crop_radius"])
    try:
        pairs = make_dataset(cfg["preset"], int(cfg["pairs"]), int(cfg["seed"]), **overrides)
    except InvalidArgument as e:
        raise ConfigError(str(e)) from None
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        s, d = f"{p.pair_id}_src.ply", f"{p.pair_id}_dst.ply"
        write_ply(p.src, out / s)
        write_ply(p.dst, out / d)
        entries.append(ManifestEntry(s, d, p.T_gt.as_matrix().reshape(-1).tolist(), p.scene, p.overlap))
    write_manifest(entries, out / "manifest.jsonl")
    _write_config(cfg, out / "config.json")
    print(f"wrote {len(entries)} pairs to {out}")
    return EXIT_OK


def cmd_pretrain_teacher(cfg) -> int:
    from .data import save_checkpoint
    from .fusion import init_teacher
    from .training import LossConfig, pretrain_teacher

    _need(cfg, "data")
    mcfg = _model_config(cfg)
    opt = _optim(cfg)
    out = Path(cfg.get("out") or _default_out("teacher.dbec"))
    pairs = _load_pairs(cfg["data"])
    if not pairs:
        raise ConfigError("dataset is empty")
    teacher = init_teacher(mcfg, seed=int(cfg["seed"]))
    out.parent.mkdir(parents=True, exist_ok=True)
    f, write = _record_writer(out.with_suffix(".log.jsonl"))
    with f:
        res = pretrain_teacher(pairs, teacher, opt, LossConfig.for_voxel(mcfg.sfcn.voxel_size),
                               int(cfg["epochs"]), int(cfg["seed"]), on_record=write)
    save_checkpoint(res.checkpoint(int(cfg["seed"]), _history(res)), out)
    _write_config(cfg, out.with_suffix(".config.json"))
    print(f"teacher checkpoint {out} final loss {res.history[-1] if res.history else float('nan'):.6f}")
    return EXIT_OK


def cmd_transfer(cfg) -> int:
    from .data import checkpoint_to_model, model_to_checkpoint, save_checkpoint
    from .fusion import TEACHER, init_dbenet
    from .training import transfer_weights

    _need(cfg, "teacher")
    scope = [s for s in str(cfg["scope"]).split(",") if s]
    out = Path(cfg.get("out") or _default_out("student.dbec"))
    ck = _load_ckpt(cfg["teacher"])
    if ck.metadata.get("kind") != TEACHER:
        raise CommandError(EXIT_IO, f"{cfg['teacher']} is not a teacher checkpoint")
    teacher = checkpoint_to_model(ck)
    student = init_dbenet(teacher.config, seed=int(cfg["seed"]))
    try:
        student, report = transfer_weights(ck, student, scope)
    except InvalidArgument as e:
        raise ConfigError(str(e)) from None
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model_to_checkpoint(student, int(cfg["seed"]), {"transferred": report.copied}), out)
    _write_config(cfg, out.with_suffix(".config.json"))
    print(f"copied {len(report.copied)} tensors, missing {len(report.missing)}, skipped {len(report.skipped)}")
    return EXIT_OK


def cmd_finetune(cfg) -> int:
    from .data import checkpoint_to_model, model_to_checkpoint, save_checkpoint
    from .fusion import STUDENT, TEACHER
    from .training import FreezeMask, KDConfig, LossConfig, finetune

    _need(cfg, "data", "init")
    opt = _optim(cfg)
    out = Path(cfg.get("out") or _default_out("finetuned.dbec"))
    kd = None
    if cfg["kd"] != "off":
        _need(cfg, "teacher")
        try:
            kd = KDConfig(float(cfg["kd_temperature"]), cfg["kd"], float(cfg["kd_weight"]))
        except InvalidArgument as e:
            raise ConfigError(str(e)) from None
    ck = _load_ckpt(cfg["init"])
    if ck.metadata.get("kind") != STUDENT:
        raise CommandError(EXIT_IO, f"{cfg['init']} is not a student checkpoint")
    model = checkpoint_to_model(ck)
    teacher = None
    if kd is not None:
        tck = _load_ckpt(cfg["teacher"])
        if tck.metadata.get("kind") != TEACHER:
            raise CommandError(EXIT_IO, f"{cfg['teacher']} is not a teacher checkpoint")
        teacher = checkpoint_to_model(tck)
    try:
        mask = FreezeMask.parse(cfg["freeze"])
        mask.apply(model.params.copy())
    except InvalidArgument as e:
        raise ConfigError(str(e)) from None
    pairs = _load_pairs(cfg["data"])
    if not pairs:
        raise ConfigError("dataset is empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    f, write = _record_writer(out.with_suffix(".log.jsonl"))
    with f:
        res = finetune(pairs, model, mask, opt, LossConfig.for_voxel(model.config.sfcn.voxel_size), kd,
                       teacher, int(cfg["epochs"]), int(cfg["seed"]), on_record=write)
    ck_out = model_to_checkpoint(res.model, int(cfg["seed"]), _history(res))
    if int(cfg["epochs"]) == 0:
        ck_out = ck  # nothing trained: the output is the input checkpoint verbatim
    save_checkpoint(ck_out, out)
    _write_config(cfg, out.with_suffix(".config.json"))
    final = res.history[-1] if res.history else float("nan")
    print(f"finetuned checkpoint {out} final loss {final:.6f}")
    return EXIT_OK


def _ransac_cfg(cfg, model):
    from .registration import RansacConfig

    eps = cfg.get("epsilon") or 2 * model.config.sfcn.voxel_size
    try:
        return RansacConfig(max_iterations=int(cfg["max_iterations"]), epsilon=float(eps), seed=int(cfg["seed"]))
    except InvalidArgument as e:
        raise ConfigError(str(e)) from None


def cmd_register(cfg) -> int:
    from .data import checkpoint_to_model, read_ply
    from .registration import register_pair

    _need(cfg, "src", "dst", "ckpt")
    model = checkpoint_to_model(_load_ckpt(cfg["ckpt"]))
    try:
        src, dst = read_ply(cfg["src"]), read_ply(cfg["dst"])
    except OSError as e:
        raise CommandError(EXIT_IO, str(e)) from None
    res, corr = register_pair(src, dst, model, cfg["mode"], _ransac_cfg(cfg, model))
    M = res.transform.as_matrix()
    for row in M:
        print(" ".join(f"{v:.9g}" for v in row))
    print(f"inliers {len(res.inliers)} of {len(corr)}")
    if res.failed:
        print("registration failed: no supported hypothesis", file=sys.stderr)
        return EXIT_REG
    return EXIT_OK


def cmd_evaluate(cfg) -> int:
    from .data import checkpoint_to_model
    from .metrics import BenchmarkReport, evaluate_pair
    from .registration import register_pair

    _need(cfg, "manifest", "ckpt")
    model = checkpoint_to_model(_load_ckpt(cfg["ckpt"]))
    pairs = _load_pairs(cfg["manifest"])
    if not pairs:
        raise ConfigError("manifest holds no pairs")
    out = Path(cfg.get("out") or _default_out("report.txt"))
    rcfg = _ransac_cfg(cfg, model)
    records = []
    for p in pairs:
        res, corr = register_pair(p.src, p.dst, model, cfg["mode"], rcfg)
        records.append(evaluate_pair(p, res, corr))
    report = BenchmarkReport(records)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = report.to_text()
    out.write_text(text, encoding="utf-8")
    out.with_suffix(".jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    _write_config(cfg, out.with_suffix(".config.json"))
    sys.stdout.write(text)
    failed = [r.pair_id for r in records if r.failed]
    if failed:
        print(f"registration failed for {len(failed)} pair(s): {', '.join(failed)}", file=sys.stderr)
        return EXIT_REG
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    from . import gradcheck

    try:
        results = gradcheck.run(cfg["scope"], int(cfg["seed"]))
    except InvalidArgument as e:
        raise ConfigError(f"{e}; known: all, ops, layers, network, {', '.join(gradcheck.scopes())}") from None
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_selftest(cfg) -> int:
    from . import selftest

    results = selftest.run(int(cfg["seed"]))
    for r in results:
        print(r.line())
    bad = sum(not r.passed for r in results)
    print(f"{len(results) - bad}/{len(results)} checks passed")
    return EXIT_OK if bad == 0 else EXIT_CHECK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "pretrain-teacher": cmd_pretrain_teacher,
    "transfer": cmd_transfer,
    "finetune": cmd_finetune,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def _run(cfg: dict, perturb: str | None) -> int:
    fn = COMMANDS[cfg["command"]]
    if perturb:
        with ad.perturb_backward(perturb):
            return fn(cfg)
    return fn(cfg)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return _run(cfg, getattr(args, "perturb_backward", None))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except GenerationError as e:
        print(f"generation error: {e}", file=sys.stderr)
        return EXIT_GEN
    except (FormatError, TransferError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except EmptyPositivesError as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAIN
    except DBENetError as e:
        code = EXIT_TRAIN if args.command in ("pretrain-teacher", "finetune") else EXIT_REG
        print(f"error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
