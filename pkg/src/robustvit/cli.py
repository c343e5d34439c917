"""Command-line entry point: ``robustvit <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adversarial import generate
from .config import ConfigError, TrainConfig, read_config_values
from .data import FormatError, load_checkpoint, load_dataset, read_manifest, save_checkpoint, \
    save_tensor, synth_toy_dataset
from .evaluation import (ABLATIONS, PlainEvaluable, RobustEvaluable, ablate, check_attack,
                         evaluate, export_embeddings, format_table, write_rows)
from .model import RobustViT
from .saliency import guided_backprop
from .training import NumericDivergence, TrainingLog, finetune, pretrain, train_baseline
from .vit import ViTClassifier

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
log = logging.getLogger("robustvit")


def _overrides(args) -> dict:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_values(args.config))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return values


def _model_from(args, **extra) -> RobustViT:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.meta.get("kind", "robustvit") != "robustvit":
        raise ConfigError([f"{args.checkpoint} holds a {ckpt.meta.get('kind')} model"])
    values = _overrides(args)
    values.update(extra)
    return RobustViT.from_checkpoint(ckpt, **values)


def _data(args, cfg: TrainConfig, split: str):
    return load_dataset(args.data, split, cfg.patch)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_list(values, cast=str):
    items = []
    for v in values or []:
        items += [cast(s) for s in str(v).split(",") if s.strip()]
    return items


def _epsilon(text) -> float:
    if isinstance(text, float):
        return text
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    size = tuple(int(v) for v in args.size.split("x"))
    contrast = tuple(float(v) for v in args.contrast.split(",")) if args.contrast else None
    synth_toy_dataset(classes=args.classes, n=args.n, dims=size, seed=args.seed or 0,
                      root=args.out, pattern=args.pattern, contrast=contrast)
    print(f"wrote dataset to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    values = _overrides(args)
    if args.epochs is not None:
        values.update(det_epochs=args.epochs, pretrain_epochs=args.epochs)
    cfg = TrainConfig.from_dict(values)
    manifest = read_manifest(args.data)
    train = load_dataset(manifest, "train", cfg.patch)
    model = RobustViT(cfg, manifest.image_shape, manifest.classes)
    history = pretrain(model, train, cfg)
    out = _out(args)
    model.save(out / "checkpoint.mtar", meta={"kind": "robustvit", "stage": "pretrained"})
    history.write_csv(out / "log.csv")
    print(f"pretrained checkpoint written to {out / 'checkpoint.mtar'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    extra = {}
    if args.mask_ratio is not None:
        extra["mask_ratio_finetune"] = args.mask_ratio
    if args.epochs is not None:
        extra["finetune_epochs"] = args.epochs
    model = _model_from(args, **extra)
    train = _data(args, model.cfg, "train")
    history = finetune(model, train)
    out = _out(args)
    model.save(out / "checkpoint.mtar", meta={"kind": "robustvit", "stage": "finetuned"})
    history.write_csv(out / "log.csv")
    print(f"fine-tuned checkpoint written to {out / 'checkpoint.mtar'}")
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    values = _overrides(args)
    cfg = TrainConfig.from_dict(values)
    manifest = read_manifest(args.data)
    train = load_dataset(manifest, "train", cfg.patch)
    model, history = train_baseline(cfg, train, manifest.image_shape, manifest.classes, epochs=args.epochs)
    out = _out(args)
    save_checkpoint(out / "checkpoint.mtar", model.state_dict(), config=cfg.to_dict(),
                    meta={"kind": "baseline", "image_shape": list(manifest.image_shape),
                          "classes": manifest.classes})
    history.write_csv(out / "log.csv")
    print(f"baseline checkpoint written to {out / 'checkpoint.mtar'}")
    return EXIT_OK


def _target(args):
    """Evaluation wrapper for either checkpoint kind, plus its config."""
    ckpt = load_checkpoint(args.checkpoint)
    values = dict(ckpt.config)
    values.update(_overrides(args))
    if ckpt.meta.get("kind") == "baseline":
        cfg = TrainConfig.from_dict(values)
        model = ViTClassifier(cfg.encoder_shape, tuple(ckpt.meta["image_shape"]), ckpt.meta["classes"],
                              np.random.default_rng(0))
        model.load_state_dict(ckpt.tensors)
        return PlainEvaluable(model), cfg, model
    model = RobustViT.from_checkpoint(ckpt, **_overrides(args))
    ratio = getattr(args, "mask_ratio", None)
    return RobustEvaluable(model, seed=model.cfg.seed, ratio=ratio), model.cfg, model


def cmd_attack(args) -> int:
    target, cfg, _ = _target(args)
    data = _data(args, cfg, args.split)
    attack = check_attack(args.attack[0] if args.attack else "pgd-10")
    eps = _epsilon(args.epsilon[0]) if args.epsilon else cfg.epsilon
    rng = np.random.default_rng([cfg.seed, 53])
    chunks = []
    for start in range(0, len(data), 200):
        xb, yb = data.x[start:start + 200], data.y[start:start + 200]
        chunks.append(generate(attack, target.surface(len(xb)), xb, yb, eps, rng,
                               descend_to_target=cfg.descend_to_target).x_adv)
    x_adv = np.concatenate(chunks) if chunks else data.x.copy()
    out = _out(args)
    save_tensor(out / "adversarial.mten", x_adv)
    save_tensor(out / "labels.mten", data.y.astype(np.float32))
    steps = int(attack.split("-")[1]) if attack.startswith("pgd-") else (0 if attack == "none" else 1)
    sidecar = {"attack": attack, "epsilon": eps, "steps": steps, "seed": cfg.seed, "split": args.split,
               "count": int(len(x_adv)), "images": "adversarial.mten", "labels": "labels.mten"}
    (out / "adversarial.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(x_adv)} {attack} examples (eps={eps:.5f}) to {out}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    model = _model_from(args)
    data = _data(args, model.cfg, args.split)
    maps = [guided_backprop(model.probe, data.x[s:s + 200]).x_prime for s in range(0, len(data), 200)]
    out = _out(args)
    save_tensor(out / "saliency.mten", np.concatenate(maps) if maps else data.x.copy())
    print(f"wrote saliency maps for {len(data)} images to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    target, cfg, _ = _target(args)
    data = _data(args, cfg, args.split)
    attacks = _split_list(args.attack) or ["none", "fgsm", "fgsm_ll", "pgd-10"]
    epsilons = _split_list(args.epsilon, _epsilon) or [cfg.epsilon]
    rows = evaluate(target, data, attacks, epsilons, cfg.seed, cfg.descend_to_target)
    out = _out(args)
    write_rows(out / "metrics.csv", rows)
    print(format_table(rows))
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.switch not in ABLATIONS:
        raise ConfigError([f"switch: unknown ablation {args.switch!r}; expected one of {', '.join(ABLATIONS)}"])
    ckpt = load_checkpoint(args.checkpoint)
    values = dict(ckpt.config)
    values.update(_overrides(args))
    cfg = TrainConfig.from_dict(values)
    ckpt.config = cfg.to_dict()
    train, test = _data(args, cfg, "train"), _data(args, cfg, args.split)
    attack = check_attack(args.attack[0] if args.attack else "pgd-10")
    eps = _epsilon(args.epsilon[0]) if args.epsilon else cfg.epsilon
    history = TrainingLog()
    models = {}
    rows = ablate(ckpt, args.switch, train, test, attack, eps, cfg.seed, log=history, models=models)
    out = _out(args)
    write_rows(out / "ablation.csv", rows)
    history.write_csv(out / "log.csv")
    if args.switch in models:
        models[args.switch].save(out / "variant.mtar",
                                 meta={"kind": "robustvit", "stage": f"ablation:{args.switch}"})
    for r in rows:
        print(f"{r.variant:<12} ratio={r.mask_ratio:.2f} std={r.standard_acc:.3f} "
              f"robust={r.robust_acc:.3f} det={r.det_acc:.3f}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model = _model_from(args)
    data = _data(args, model.cfg, args.split)
    eps = _epsilon(args.epsilon[0]) if args.epsilon else model.cfg.epsilon
    out = _out(args)
    export_embeddings(model, data, out / "embeddings.csv", eps, model.cfg.seed)
    print(f"wrote embeddings to {out / 'embeddings.csv'}")
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "train-baseline": cmd_train_baseline,
    "attack": cmd_attack,
    "saliency": cmd_saliency,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustvit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, checkpoint=False, data=True, split=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if data:
            p.add_argument("--data", required=True, help="dataset directory with manifest.json")
        if split:
            p.add_argument("--split", default="test")
        return p

    p = add("synth-data", "write the synthetic oriented-stripes dataset", data=False)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--size", default="16x16x1", help="HxWxC")
    p.add_argument("--pattern", default="stripes", choices=["stripes", "bar"])
    p.add_argument("--contrast", help="min,max stripe amplitude")

    p = add("pretrain", "train the detector and pretrain the dual encoders")
    p.add_argument("--epochs", type=int, help="override detector and pretraining epochs")

    p = add("finetune", "fine-tune the classification head", checkpoint=True)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--epochs", type=int)

    p = add("train-baseline", "train an undefended ViT with the classifier's epoch budget")
    p.add_argument("--epochs", type=int)

    for name, help_text in (("attack", "write adversarial examples"),
                            ("eval", "accuracy and robustness table"),
                            ("ablate", "retrain one ablation and compare")):
        p = add(name, help_text, checkpoint=True, split=True)
        p.add_argument("--attack", action="append", help="none, fgsm, fgsm_ll or pgd-<k>")
        p.add_argument("--epsilon", action="append", help="budget, e.g. 8/255")
        if name == "ablate":
            p.add_argument("--switch", required=True, help=", ".join(ABLATIONS))
        else:
            p.add_argument("--mask-ratio", type=float, help="evaluation masking ratio")

    add("saliency", "write guided-backprop saliency maps", checkpoint=True, split=True)
    p = add("export-embeddings", "write detector and classifier representations", checkpoint=True,
            split=True)
    p.add_argument("--epsilon", action="append")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericDivergence as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError, KeyError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
