"""Command-line entry point: ``cardioguard <subcommand> ...``.

Exit codes: 0 success, 1 findings reported under ``--strict`` (or a failed
bank audit), 2 errors.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import bank as bank_mod
from . import criteria, datagen, metrics, numerics, vae, warp
from .errors import CardioGuardError, ConfigError, EmptyDataset
from .grid import LabelMap, View, read_png, register, write_png

log = logging.getLogger("cardioguard")


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    """Values shared by subcommands. Command-line flags override the file."""

    view: str = "sa"
    canvas: int = 64
    scheme: str = "default"
    thresholds: str = ""  # path to a thresholds JSON file; empty means built-in defaults
    calibrate_from: str = ""  # directory of valid maps to calibrate from instead
    model: str = ""
    robust_model: str = ""
    bank: str = ""
    seed: int = 0
    threads: int = 1
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    reg_weight: float = 30.0
    widths: str = "12,24,48,96"
    bank_size: int = 50_000
    bandwidth: str = "diagonal"
    bandwidth_scale: float = 2.5

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Parse ``key = value`` lines (``#`` comments, optional ``[run]`` header)."""
        text = Path(path).read_text()
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if cp.sections() != ["run"]:
            raise ConfigError(f"{path}: only a [run] section is allowed")
        known = {f.name: f for f in fields(cls)}
        out = cls()
        for key, raw in cp["run"].items():
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r}")
            typ = type(getattr(out, key))
            try:
                setattr(out, key, typ(raw))
            except ValueError:
                raise ConfigError(f"{path}: {key} expects {typ.__name__}, got {raw!r}") from None
        out.validate()
        return out

    def validate(self) -> None:
        try:
            View(self.view)
        except ValueError:
            raise ConfigError(f"view must be sa or la, not {self.view!r}") from None
        if self.scheme != "default":
            raise ConfigError("only the default class scheme is supported")
        if self.canvas % 16 or self.canvas <= 0:
            raise ConfigError("canvas must be a positive multiple of 16")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def width_tuple(self) -> tuple:
        return tuple(int(w) for w in self.widths.split(","))


def _resolve(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, type(getattr(cfg, f.name))(v))
    cfg.validate()
    log.info("config %s", json.dumps(asdict(cfg), sort_keys=True))
    log.info("formats model=%d bank=%d", numerics.FORMAT_VERSION, bank_mod.FORMAT_VERSION)
    return cfg


def _thresholds(cfg: RunConfig) -> criteria.Thresholds:
    if cfg.thresholds:
        return criteria.Thresholds.from_json(Path(cfg.thresholds).read_text())
    if cfg.calibrate_from:
        maps = [m for m, _ in _read_dir(cfg.calibrate_from, cfg.view)]
        return criteria.calibrate_thresholds(maps + [register(m)[0] for m in maps])
    return criteria.Thresholds()


# ---------------------------------------------------------------- IO helpers

def _read_dir(d, view=None) -> list[tuple[LabelMap, str]]:
    files = sorted(Path(d).glob("*.png"))
    if not files:
        raise EmptyDataset(f"no PNG maps in {d}")
    return [(read_png(f, view), f.name) for f in files]


def _read_targets(d) -> dict:
    p = Path(d) / "targets.csv"
    if not p.exists():
        raise EmptyDataset(f"{p} is missing")
    with open(p, newline="") as fh:
        return {r["file"]: float(r["t"]) for r in csv.DictReader(fh)}


def _training_set(d, view) -> list[tuple[LabelMap, float]]:
    targets = _read_targets(d)
    out = []
    for m, name in _read_dir(d, view):
        if name in targets:
            out.append((register(m)[0], targets[name]))
    if not out:
        raise EmptyDataset(f"no maps in {d} have targets")
    return out


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _overlay(inp: LabelMap, out: LabelMap, path) -> None:
    import cv2

    scale = max(1, 256 // max(inp.width, inp.height))
    big = lambda px: np.kron(px, np.ones((scale, scale), np.uint8))
    a, b = big(inp.pixels), big(out.pixels)
    img = np.full(a.shape + (3,), 255, np.uint8)
    colours = {1: (200, 80, 80), 2: (80, 160, 80), 3: (80, 80, 220)}
    for cls, col in colours.items():
        for px, thick in ((a, 1), (b, 2)):
            cs, _ = cv2.findContours((px == cls).astype(np.uint8), cv2.RETR_LIST, cv2.CHAIN_APPROX_NONE)
            shade = tuple(int(c * (0.5 if thick == 1 else 1.0)) for c in col)
            cv2.drawContours(img, cs, -1, shade, thick)
    cv2.imwrite(str(path), img)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    th = _thresholds(cfg) if (cfg.thresholds or cfg.calibrate_from) else None
    if args.defects:
        spec = json.loads(Path(args.defects).read_text())
        unknown = set(spec) - {"count", "seed", "kinds"}
        if unknown:
            raise ConfigError(f"unknown defect spec keys {sorted(unknown)}")
        count = int(spec.get("count", args.count))
        seed = int(spec.get("seed", cfg.seed))
        if th is None:
            # uncalibrated defaults cannot trigger every defect at desk resolution
            ref = [m for m, _ in datagen.generate(cfg.view, 500, seed, args.size)]
            th = criteria.calibrate_thresholds(ref + [register(m)[0] for m in ref])
            log.info("no thresholds given; calibrated on 500 generated maps")
            (out / "thresholds.json").write_text(th.to_json() + "\n")
        corpus = datagen.defect_corpus(cfg.view, count, seed, args.size, th, kinds=spec.get("kinds"))
        (out / "gt").mkdir(exist_ok=True)
        with open(out / "defects.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "kind", "structure", "magnitude", "seed", "target"])
            for i, (gt, bad, ds) in enumerate(corpus):
                name = f"map_{i:05d}.png"
                write_png(bad, out / name)
                write_png(gt, out / "gt" / name)
                w.writerow([name, ds.kind.value, ds.structure or "", ds.magnitude, ds.seed,
                            datagen.target_criterion(cfg.view, ds)])
        print(f"wrote {len(corpus)} defective maps to {out}")
        return 0
    data = datagen.generate(cfg.view, args.count, cfg.seed, args.size, th)
    with open(out / "targets.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "t"])
        for i, (m, t) in enumerate(data):
            name = f"map_{i:05d}.png"
            write_png(m, out / name)
            w.writerow([name, repr(float(t))])
    maps = [m for m, _ in data]
    cal = criteria.calibrate_thresholds(maps + [register(m)[0] for m in maps], base=th)
    (out / "thresholds.json").write_text(cal.to_json() + "\n")
    print(f"wrote {len(data)} maps, targets.csv and thresholds.json to {out}")
    return 0


def cmd_train(args, cfg):
    data = _training_set(args.data, cfg.view)
    tc = vae.TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, epochs=cfg.epochs,
                         batch_size=cfg.batch_size, seed=cfg.seed, reg_weight=cfg.reg_weight)
    arch = vae.Architecture(view=cfg.view, canvas=cfg.canvas, widths=cfg.width_tuple)
    model = vae.train(data, tc, arch)
    model.save(args.out)
    print(f"trained on {len(data)} maps; final loss {model.log[-1]['total']:.3f}; saved {args.out}")
    return 0


def cmd_finetune_robust(args, cfg):
    model = vae.VaeParams.load(args.model or cfg.model)
    data = _training_set(args.data, model.view.value)
    th = _thresholds(cfg)
    pairs = vae.harvest_pairs(model, data, args.pairs, cfg.seed, th,
                              vae.AlphaDist(args.alpha_min, args.alpha_max))
    tc = vae.TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, epochs=args.epochs,
                         batch_size=cfg.batch_size, seed=cfg.seed, reg_weight=cfg.reg_weight)
    robust = vae.finetune_robust(model, pairs, tc, clean=None if args.no_clean else data)
    robust.save(args.out)
    extra = "" if args.no_clean else f" plus {len(data)} clean maps"
    print(f"fine-tuned the encoder on {len(pairs)} pairs{extra}; saved {args.out}")
    return 0


def cmd_augment_bank(args, cfg):
    model = vae.VaeParams.load(args.model or cfg.model)
    th = _thresholds(cfg)
    data = _training_set(args.data, model.view.value)
    seeds = vae.encode(model, [m for m, _ in data]).mu
    count = args.count or cfg.bank_size
    b = bank_mod.build_bank(model, seeds, count, cfg.seed, th, cfg.bandwidth, cfg.bandwidth_scale)
    bank_mod.save(b, args.out)
    print(f"bank of {b.count} vectors written to {args.out}; stats {json.dumps(b.meta['stats'])}")
    return 0


def cmd_validate(args, cfg):
    th = _thresholds(cfg)
    n_bad = 0
    lines = []
    for m, name in _read_dir(args.inp):
        rep = criteria.check(m, th)
        n_bad += not rep.valid
        st = {k: (None if v is None else round(float(v), 6)) for k, v in criteria.stats(m).items()}
        lines.append(json.dumps({"file": name, "view": m.view.value, "valid": rep.valid,
                                 "violated": rep.violations, "stats": st}, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    log.info("%d of %d maps invalid", n_bad, len(lines))
    return 1 if (args.strict and n_bad) else 0


def cmd_postprocess(args, cfg):
    model = vae.VaeParams.load(args.model or cfg.model)
    robust = vae.VaeParams.load(args.robust_model or cfg.robust_model) if (args.robust_model or cfg.robust_model) else None
    bank_path = args.bank or cfg.bank
    b = bank_mod.load(bank_path) if bank_path else None
    mode = warp.WarpMode.parse(args.mode)
    th = _thresholds(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.overlay:
        Path(args.overlay).mkdir(parents=True, exist_ok=True)
    entries = []
    for m, name in _read_dir(args.inp, model.view.value):
        res = warp.postprocess(m, model, b, mode, th, robust, threads=cfg.threads)
        write_png(res.output, out / name)
        e = {"file": name, **res.to_json()}
        if not args.timing:
            e.pop("seconds")
        entries.append(e)
        if args.overlay:
            _overlay(m, res.output, Path(args.overlay) / name)
    summary = {"mode": mode.value, "maps": len(entries),
               "invalid_before": sum(not e["valid_before"] for e in entries),
               "invalid_after": sum(not e["valid_after"] and not e["registration_failed"] for e in entries),
               "registration_failed": sum(e["registration_failed"] for e in entries)}
    _write_json(args.report, {"summary": summary, "files": entries})
    if args.report not in (None, "-"):
        print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args, cfg):
    preds = {n: m for m, n in _read_dir(args.pred)}
    gts = {n: m for m, n in _read_dir(args.gt)}
    rows = []
    ef = {}
    if args.ef_pairs:
        with open(args.ef_pairs, newline="") as fh:
            for r in csv.DictReader(fh):
                ed, es = r["ed"], r["es"]
                for cls in (1, 2, 3):
                    try:
                        ef[(ed, cls)] = metrics.area_fraction_error(preds[ed], preds[es], gts[ed], gts[es], cls)
                    except CardioGuardError:
                        pass
    for name in sorted(gts):
        if name not in preds:
            log.warning("no prediction for %s", name)
            continue
        rep = metrics.compare(preds[name], gts[name])
        for cls in rep.dice:
            hd = rep.hausdorff[cls]
            rows.append({"file": name, "class": cls, "dice": round(rep.dice[cls], 6),
                         "hd": "" if np.isnan(hd) else round(hd, 6),
                         "ef_err": round(ef[(name, cls)], 6) if (name, cls) in ef else ""})
    means = metrics.write_eval_csv(args.out, rows)
    print(json.dumps({str(k): v for k, v in means.items()}, sort_keys=True))
    return 0


def cmd_audit_bank(args, cfg):
    model = vae.VaeParams.load(args.model or cfg.model)
    b = bank_mod.load(args.bank or cfg.bank)
    bad = bank_mod.audit(b, model, _thresholds(cfg))
    print(json.dumps({"count": b.count, "invalid": len(bad), "invalid_indices": bad[:100]}))
    return 1 if bad else 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cardioguard", description="Anatomically guaranteed post-processing "
                                "of cardiac label maps.")
    p.add_argument("--version", action="version",
                   version=f"cardioguard {__version__} (model format {numerics.FORMAT_VERSION}, "
                           f"bank format {bank_mod.FORMAT_VERSION})")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--threads", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--view", choices=["sa", "la"])
    common.add_argument("--thresholds", "--criteria", dest="thresholds", help="thresholds JSON file")
    common.add_argument("--calibrate-from", dest="calibrate_from", help="calibrate thresholds from these maps")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic valid or defective maps")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--defects", help="JSON {count, seed} for a defect corpus")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train the constrained VAE")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--reg-weight", dest="reg_weight", type=float)
    t.add_argument("--canvas", type=int)
    t.add_argument("--widths")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune-robust", parents=[common], help="fine-tune a denoising encoder")
    f.add_argument("--model")
    f.add_argument("--data", required=True)
    f.add_argument("--pairs", type=int, default=2000)
    f.add_argument("--epochs", type=int, default=5)
    f.add_argument("--alpha-min", dest="alpha_min", type=float, default=2.0,
                   help="smallest latent shift, in latent std units")
    f.add_argument("--alpha-max", dest="alpha_max", type=float, default=8.0)
    f.add_argument("--no-clean", dest="no_clean", action="store_true",
                   help="train on corrupted pairs only, without clean identity pairs")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_finetune_robust)

    a = sub.add_parser("augment-bank", parents=[common], help="build the valid latent bank")
    a.add_argument("--model")
    a.add_argument("--data", required=True, help="training maps whose latents seed the bank")
    a.add_argument("--count", type=int)
    a.add_argument("--bandwidth", choices=["isotropic", "diagonal"])
    a.add_argument("--bandwidth-scale", dest="bandwidth_scale", type=float)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment_bank)

    v = sub.add_parser("validate", parents=[common], help="check maps against the criteria")
    v.add_argument("--in", dest="inp", required=True)
    v.add_argument("--report")
    v.add_argument("--strict", action="store_true", help="exit 1 when any map is invalid")
    v.set_defaults(func=cmd_validate)

    pp = sub.add_parser("postprocess", parents=[common], help="make maps anatomically valid")
    pp.add_argument("--model")
    pp.add_argument("--robust-model", dest="robust_model")
    pp.add_argument("--bank")
    pp.add_argument("--mode", default="dicho")
    pp.add_argument("--in", dest="inp", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--report")
    pp.add_argument("--overlay", help="directory for contour overlay PNGs")
    pp.add_argument("--timing", action="store_true", help="include wall times in the report")
    pp.set_defaults(func=cmd_postprocess)

    e = sub.add_parser("eval", parents=[common], help="Dice / Hausdorff / EF-proxy table")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--ef-pairs", dest="ef_pairs", help="CSV with columns ed,es naming file pairs")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    ab = sub.add_parser("audit-bank", parents=[common], help="re-verify every bank vector")
    ab.add_argument("--model")
    ab.add_argument("--bank")
    ab.set_defaults(func=cmd_audit_bank)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return args.func(args, cfg)
    except (CardioGuardError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
