"""Command-line surface.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 capability error. All numeric CSV output is fixed to six decimal
places so reruns with the same inputs and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import analysis, attacks, perturb
from . import model as M
from . import training as TR
from .errors import CapabilityError, ConfigError, ContractError, FormatError
from .features import freq_embed, load_ppm, read_emb1, save_ppm, write_emb1

CONFIG_SECTIONS = {
    "model": M.ModelConfig,
    "train": TR.TrainConfig,
    "loss": M.MarginLossConfig,
    "attack": attacks.AttackConfig,
}


def _field_index() -> dict[str, tuple[str, type]]:
    index: dict[str, tuple[str, type]] = {}
    for section, cls in CONFIG_SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name in index:
                continue
            index[f.name] = (section, cls)
    return index


_FIELDS = _field_index()


def parse_config_file(path) -> dict[str, dict]:
    """Parse a key=value config file into per-section override dicts.

    Unknown keys are rejected. `seed` feeds the train section; the
    modality mask is a comma-separated subset of visual,text,frequency.
    """
    overrides: dict[str, dict] = {name: {} for name in CONFIG_SECTIONS}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw_line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}")
        section, cls = _FIELDS[key]
        overrides[section][key] = _coerce(cls, key, value)
    return overrides


def _coerce(cls, key: str, value: str):
    (f,) = [f for f in dataclasses.fields(cls) if f.name == key]
    try:
        if key == "modality_mask":
            return tuple(v.strip() for v in value.split(",") if v.strip())
        if f.type.startswith("bool") or isinstance(f.default, bool):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if isinstance(f.default, int) and not isinstance(f.default, bool):
            return int(value)
        if isinstance(f.default, float):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"invalid value {value!r} for configuration key {key!r}")


def build_configs(args) -> dict:
    overrides = parse_config_file(args.config) if getattr(args, "config", None) else {
        name: {} for name in CONFIG_SECTIONS
    }
    if getattr(args, "seed", None) is not None:
        overrides["train"]["seed"] = args.seed
    try:
        return {name: cls(**overrides[name]) for name, cls in CONFIG_SECTIONS.items()}
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc))


def _load_dataset(path):
    if not Path(path).exists():
        raise FormatError(f"dataset file not found: {path}")
    return read_emb1(path)


def _load_checkpoint(path):
    if not Path(path).exists():
        raise FormatError(f"checkpoint file not found: {path}")
    return M.load_checkpoint(path)


def _load_image(path):
    if not Path(path).exists():
        raise FormatError(f"image file not found: {path}")
    return load_ppm(path)


def _parse_mask(text: str) -> tuple[str, ...]:
    mask = tuple(m.strip() for m in text.split(",") if m.strip())
    if not mask or any(m not in M.MODALITIES for m in mask):
        raise ConfigError(
            f"modality mask must be a non-empty subset of {','.join(M.MODALITIES)}, got {text!r}"
        )
    return mask


# ---------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfgs = build_configs(args)
    train_set = _load_dataset(args.train)
    val_set = _load_dataset(args.val)
    model, history = TR.train(
        train_set, val_set, cfgs["model"], cfgs["train"], cfgs["loss"],
        log=(None if args.quiet else print),
    )
    M.save_checkpoint(model, args.out)
    if args.history:
        Path(args.history).write_text(TR.history_csv(history), encoding="utf-8")
    best = max(h.val_accuracy for h in history)
    print(f"checkpoint written to {args.out} ({len(history)} epochs, best val acc {best:.2f}%)")
    return 0


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    config = model.config
    if args.modality_mask:
        config = dataclasses.replace(config, modality_mask=_parse_mask(args.modality_mask))
    report = TR.evaluate(dataset, model, config)
    print(report.describe())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return 0


def cmd_attack(args) -> int:
    cfgs = build_configs(args)
    atk: attacks.AttackConfig = cfgs["attack"]
    if args.eta is not None:
        atk = dataclasses.replace(atk, magnitude=args.eta)
    if args.eps is not None:
        atk = dataclasses.replace(atk, bound=args.eps)
    if args.gamma is not None:
        atk = dataclasses.replace(atk, step_size=args.gamma)
    if args.steps is not None:
        atk = dataclasses.replace(atk, iterations=args.steps)
    model = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    adversarial = attacks.attack_dataset(dataset, model, args.method, atk, cfgs["loss"])
    write_emb1(adversarial, args.out)
    clean = TR.evaluate(dataset, model)
    attacked = TR.evaluate(adversarial, model)
    print(f"clean:    {clean.describe().splitlines()[1]}")
    print(f"attacked: {attacked.describe().splitlines()[1]}")
    print(f"adversarial dataset written to {args.out}")
    return 0


def cmd_perturb(args) -> int:
    if args.sweep:
        return _cmd_sweep(args)
    if not (args.image and args.kind and args.level is not None and args.out):
        raise ConfigError("perturb needs --image, --kind, --level and --out (or --sweep)")
    img = _load_image(args.image)
    out = perturb.perturb(img, args.kind, args.level, seed=args.seed or 0)
    save_ppm(out, args.out)
    print(f"perturbed image written to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    if not (args.checkpoint and args.data and args.image_dir):
        raise ConfigError("--sweep needs --checkpoint, --data and --image-dir")
    model = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    image_dir = Path(args.image_dir)
    images = {}
    for rec in dataset:
        candidate = image_dir / f"{rec.id}.ppm"
        if candidate.exists():
            images[rec.id] = load_ppm(candidate)
    if not images:
        raise CapabilityError(
            f"no <record id>.ppm images found under {image_dir}; frequency-only "
            "sweeps need the source images"
        )
    kinds = (
        [k.strip() for k in args.kinds.split(",") if k.strip()]
        if args.kinds
        else list(perturb.DEFAULT_LEVELS)
    )
    grids = [perturb.PerturbGrid.default(k) for k in kinds]
    rows = perturb.robustness_sweep(dataset, model, grids, images=images, seed=args.seed or 0)
    csv_text = perturb.sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
        print(f"sweep table written to {args.out}")
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_saliency(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    matches = [r for r in dataset if r.id == args.id] if args.id else list(dataset)[:1]
    if not matches:
        raise FormatError(f"record id {args.id!r} not found in {args.data}")
    record = matches[0]
    img = _load_image(args.image)
    smap = analysis.saliency(img, record, model)
    if args.out_pgm:
        analysis.save_saliency_pgm(smap, args.out_pgm)
    if args.out_raw:
        analysis.save_saliency_raw(smap, args.out_raw)
    flag = " (zero gradient)" if smap.zero_gradient else ""
    label = "fake" if smap.predicted_label == 1 else "real"
    print(f"{record.id}: predicted {label}, confidence {smap.confidence:.6f}{flag}")
    return 0


def cmd_freq_embed(args) -> int:
    img = _load_image(args.image)
    vec = freq_embed(img)
    print(",".join(f"{x:.6f}" for x in vec))
    return 0


def cmd_inspect_routing(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    n = model.config.caps_per_modality
    lines = ["record_id,modality,capsule,coupling"]
    for rec in dataset:
        coeffs, _ = analysis.final_couplings(rec, model)
        for i, value in enumerate(coeffs):
            modality = analysis.MODALITY_OF_ROW[i // n]
            lines.append(f"{rec.id},{modality},{i},{value:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"routing table written to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_export_capsules(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    text = analysis.export_capsules(dataset, model)
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"capsule export written to {args.out}")
    return 0


# ---------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsdet",
        description="Multimodal capsule-routing detector for instruction-guided image edits",
    )
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--threads", type=int, default=1, help="worker threads (reserved)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector on EMB1 datasets")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an EMB1 dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--modality-mask", dest="modality_mask")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="embedding-space FGSM/PGD attack on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", required=True, choices=("fgsm", "pgd"))
    p.add_argument("--eta", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("perturb", help="apply a natural perturbation or run a sweep")
    p.add_argument("--image")
    p.add_argument("--kind")
    p.add_argument("--level", type=float)
    p.add_argument("--out")
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--image-dir", dest="image_dir")
    p.add_argument("--kinds")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("saliency", help="pixel saliency of the prediction confidence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--id")
    p.add_argument("--out-pgm", dest="out_pgm")
    p.add_argument("--out-raw", dest="out_raw")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("freq-embed", help="print the 768-dim frequency embedding of an image")
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_freq_embed)

    p = sub.add_parser("inspect-routing", help="dump final coupling coefficients as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_routing)

    p = sub.add_parser("export-capsules", help="export votes and class capsules as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_capsules)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ContractError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CapabilityError as exc:
        print(f"capability error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
