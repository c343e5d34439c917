"""Evaluation harness, ablations and embedding export."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .adversarial import generate
from .classifier import masked_encode, adaptive_ensemble
from .config import TrainConfig
from .data import Checkpoint, ImageBatch, load_checkpoint
from .detector import detector_forward
from .model import RobustViT
from .training import TrainingLog, finetune, pretrain_backbone, train_detector
from .vit import gap

ATTACK_SEED_OFFSET = 1000
ABLATIONS = ("no-snn", "no-gb", "no-msa-bias", "no-cl", "no-ae", "mask-ratio")
SWEEP_RATIOS = tuple(round(0.25 + 0.05 * k, 2) for k in range(12))


def check_attack(name: str) -> str:
    if name in ("none", "fgsm", "fgsm_ll"):
        return name
    if name.startswith("pgd-") and name[4:].isdigit() and int(name[4:]) > 0:
        return name
    raise ValueError(f"unknown attack {name!r}; expected none, fgsm, fgsm_ll or pgd-<k>")


@dataclass
class EvalRow:
    attack: str
    epsilon: float
    n: int
    correct: int
    incorrect: int
    accuracy: float
    det_acc: float
    joint_acc: float


FIELDS = list(EvalRow.__dataclass_fields__)


class Evaluable:
    """What the harness needs from a model: logits, an attack surface and (optionally) a detector."""

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def surface(self, n: int) -> Callable:
        raise NotImplementedError

    def clean_probability(self, x: np.ndarray) -> np.ndarray | None:
        return None


class RobustEvaluable(Evaluable):
    """Wraps the full model. Predictions use fixed evaluation masks; with
    ``attack_masks = independent`` the attacker differentiates through a
    different mask pair than the one used to classify."""

    def __init__(self, model: RobustViT, seed: int = 0, ratio: float | None = None,
                 ensemble: str | None = None):
        self.model, self.seed, self.ratio, self.ensemble = model, seed, ratio, ensemble

    def predict_logits(self, x):
        return self.model.predict_logits(x, seed=self.seed, ratio=self.ratio, ensemble=self.ensemble)

    def surface(self, n):
        shift = ATTACK_SEED_OFFSET if self.model.cfg.attack_masks == "independent" else 0
        vc, va = self.model.eval_masks(n, self.seed + shift, self.ratio)
        return self.model.attack_surface(vc, va, self.ensemble)

    def clean_probability(self, x):
        return self.model.clean_probability(x)


class PlainEvaluable(Evaluable):
    """Any ``Tensor -> logits`` classifier, e.g. the undefended baseline."""

    def __init__(self, model):
        self.model = model

    def predict_logits(self, x):
        with ag.no_grad():
            return self.model(ag.Tensor(np.asarray(x, dtype=np.float32))).data

    def surface(self, n):
        return self.model


def evaluate(target: Evaluable, data: ImageBatch, attacks=("none",), epsilons=(8 / 255,),
             seed: int = 0, descend_to_target: bool = False, batch_size: int = 200) -> list[EvalRow]:
    """Standard accuracy and robustness per (attack, epsilon).

    ``det_acc`` is the fraction of images the detector labels correctly (clean
    images as clean, attacked ones as adversarial); ``joint_acc`` counts images
    where both the classifier and the detector are right. Both are NaN without
    a detector.
    """
    attacks = [check_attack(a) for a in attacks]
    rows = []
    for attack in attacks:
        for eps in ([0.0] if attack == "none" else epsilons):
            rng = np.random.default_rng([seed, 31, len(rows)])
            correct = det_ok = joint = 0
            has_det = True
            for start in range(0, len(data), batch_size):
                xb = data.x[start:start + batch_size]
                yb = data.y[start:start + batch_size]
                x_eval = generate(attack, target.surface(len(xb)), xb, yb, eps, rng,
                                  descend_to_target=descend_to_target).x_adv
                pred = np.argmax(target.predict_logits(x_eval), axis=1)
                ok = pred == yb
                correct += int(ok.sum())
                p = target.clean_probability(x_eval)
                if p is None:
                    has_det = False
                    continue
                flagged_right = (p >= 0.5) if (attack == "none" or eps == 0) else (p < 0.5)
                det_ok += int(flagged_right.sum())
                joint += int((ok & flagged_right).sum())
            n = len(data)
            rows.append(EvalRow(
                attack=attack, epsilon=float(eps), n=n, correct=correct, incorrect=n - correct,
                accuracy=correct / n if n else float("nan"),
                det_acc=det_ok / n if has_det and n else float("nan"),
                joint_acc=joint / n if has_det and n else float("nan"),
            ))
    return rows


def detection_accuracy_on(model: RobustViT, data: ImageBatch, epsilon: float = 8 / 255,
                          seed: int = 0) -> float:
    """Balanced accuracy on held-out clean images and their least-likely FGSM versions.

    The adversarial images are crafted against the probe, as in detector training.
    """
    rng = np.random.default_rng([seed, 37])
    adv = generate("fgsm_ll", model.probe, data.x, data.y, epsilon, rng,
                   descend_to_target=model.cfg.descend_to_target).x_adv
    p_clean = model.clean_probability(data.x)
    p_adv = model.clean_probability(adv)
    return float(((p_clean >= 0.5).sum() + (p_adv < 0.5).sum()) / (2 * len(data)))


def write_rows(path, rows: list, fields: list[str] | None = None) -> None:
    dicts = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in rows]
    fields = fields or list(dicts[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in dicts:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def format_table(rows: list[EvalRow]) -> str:
    lines = [f"{'attack':<10}{'eps':>8}{'n':>6}{'acc':>8}{'det_acc':>9}{'joint':>8}"]
    for r in rows:
        lines.append(f"{r.attack:<10}{r.epsilon:>8.4f}{r.n:>6}{r.accuracy:>8.3f}"
                     f"{r.det_acc:>9.3f}{r.joint_acc:>8.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ablations


def variant_model(ckpt: Checkpoint, retrain: str, **overrides) -> RobustViT:
    """Rebuild a checkpointed model under config overrides.

    Components listed in ``retrain`` ("detector", "backbone", "head") keep
    their fresh initialization; everything else is loaded from the checkpoint.
    """
    values = dict(ckpt.config)
    values.update(overrides)
    cfg = TrainConfig.from_dict(values)
    model = RobustViT(cfg, tuple(ckpt.meta["image_shape"]), ckpt.meta["classes"])
    skip = []
    if "detector" in retrain:
        skip.append("detector.")
    if "backbone" in retrain:
        skip += ["classifier.clean_encoder.", "classifier.adv_encoder.", "classifier.mask_token",
                 "classifier.decoder."]
    if "head" in retrain:
        skip.append("classifier.head.")
    own = model.state_dict()
    wanted = [k for k in own if not any(k.startswith(s) for s in skip)]
    missing = [k for k in wanted if k not in ckpt.tensors]
    if missing:
        raise KeyError(f"checkpoint lacks tensor {missing[0]}")
    state = {k: ckpt.tensors[k] for k in wanted}
    for name, param in model.named_parameters():
        if name in state:
            if state[name].shape != param.data.shape:
                raise ValueError(f"tensor {name}: checkpoint dims {state[name].shape} != {param.data.shape}")
            param.data = state[name].astype(param.data.dtype).copy()
    return model


SWITCHES = {
    "no-snn": ("detector", {"lam": 0.0}),
    "no-gb": ("detector", {"detector_variant": "no-gb"}),
    "no-msa-bias": ("detector", {"detector_variant": "no-msa-bias"}),
    "no-cl": ("backbone", {"omega": 0.0}),
    "no-ae": ("", {"ensemble": "average"}),
}


@dataclass
class AblationRow:
    variant: str
    mask_ratio: float
    standard_acc: float
    robust_acc: float
    det_acc: float


def _score(model: RobustViT, test: ImageBatch, attack: str, epsilon: float,
           seed: int, ratio: float | None = None) -> tuple[float, float, float]:
    target = RobustEvaluable(model, seed, ratio)
    rows = evaluate(target, test, ["none", attack], [epsilon], seed, model.cfg.descend_to_target)
    return rows[0].accuracy, rows[1].accuracy, detection_accuracy_on(model, test, epsilon, seed)


def ablate(source, switch: str, train: ImageBatch, test: ImageBatch, attack: str = "pgd-10",
           epsilon: float = 8 / 255, seed: int = 0, ratios=SWEEP_RATIOS,
           log: TrainingLog | None = None, models: dict | None = None) -> list[AblationRow]:
    """Retrain the stages a switch touches and score the variant next to the full method.

    ``source`` is a fine-tuned checkpoint (path or Checkpoint). The variant's
    head is retrained from its initial weights with the same budget and seed.
    Trained variants are stored in ``models`` under their row name when given.
    """
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    check_attack(attack)
    if switch == "mask-ratio":
        rows = []
        for r in ratios:
            model = variant_model(ckpt, "head", mask_ratio_finetune=float(r))
            history = finetune(model, train)
            if log is not None:
                log.rows += [(e, f"ratio={r}", m, v) for e, _, m, v in history.rows]
            std, rob, det = _score(model, test, attack, epsilon, seed, ratio=float(r))
            rows.append(AblationRow(f"ratio={r}", float(r), std, rob, det))
            if models is not None:
                models[f"ratio={r}"] = model
        return rows
    if switch not in SWITCHES:
        raise ValueError(f"unknown ablation {switch!r}; expected one of {', '.join(ABLATIONS)}")
    full = RobustViT.from_checkpoint(ckpt)
    base = full.cfg.mask_ratio_finetune
    rows = [AblationRow("full", base, *_score(full, test, attack, epsilon, seed))]
    stage, overrides = SWITCHES[switch]
    model = variant_model(ckpt, stage + ",head", **overrides)
    if stage == "detector":
        history = train_detector(model, train)
    elif stage == "backbone":
        history = pretrain_backbone(model, train)
    else:
        history = TrainingLog()
    history.extend(finetune(model, train))
    if log is not None:
        log.rows += [(e, switch, m, v) for e, _, m, v in history.rows]
    rows.append(AblationRow(switch, base, *_score(model, test, attack, epsilon, seed)))
    if models is not None:
        models[switch] = model
    return rows


# ---------------------------------------------------------------------------
# embeddings


def export_embeddings(model: RobustViT, data: ImageBatch, path, epsilon: float = 8 / 255,
                      seed: int = 0) -> None:
    """Write detector features and classifier representations of clean and FGSM-LL images.

    Columns: ``kind,index,label,adversarial,e0..e{D-1}`` with kind one of
    ``detector`` (pooled detector features), ``z_bar_clean`` / ``z_bar_adv``
    (pooled masked-encoder outputs) and ``z_hat`` (pooled adaptive ensemble).
    """
    rng = np.random.default_rng([seed, 41])
    adv = generate("fgsm_ll", model.probe, data.x, data.y, epsilon, rng,
                   descend_to_target=model.cfg.descend_to_target).x_adv
    rows = []
    for flag, x in ((0, data.x), (1, adv)):
        det = detector_forward(model.detector, x, model.probe)
        vc, va = model.eval_masks(len(x), seed)
        with ag.no_grad():
            cls = model.classifier
            zc = masked_encode(x, vc, cls.clean_encoder, cls.mask_token)
            za = masked_encode(x, va, cls.adv_encoder, cls.mask_token)
            p = det.p if model.cfg.ensemble == "adaptive" else np.full(len(x), 0.5)
            zh = adaptive_ensemble(zc, za, vc, va, p).z_hat
            reps = {"detector": det.z, "z_bar_clean": gap(zc).data, "z_bar_adv": gap(za).data,
                    "z_hat": gap(zh).data}
        for kind, mat in reps.items():
            for i, vec in enumerate(mat):
                rows.append([kind, i, int(data.y[i]), flag] + [repr(float(v)) for v in vec])
    width = max(len(r) for r in rows) - 4
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "index", "label", "adversarial"] + [f"e{k}" for k in range(width)])
        writer.writerows(rows)


def read_embeddings(path, kind: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (vectors, labels, adversarial flags) for one ``kind`` of an exported CSV."""
    vecs, labels, flags = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["kind"] != kind:
                continue
            vecs.append([float(v) for k, v in row.items() if k.startswith("e") and v != ""])
            labels.append(int(row["label"]))
            flags.append(int(row["adversarial"]))
    return np.asarray(vecs), np.asarray(labels), np.asarray(flags)


def centroid_distance(vectors: np.ndarray, groups: np.ndarray) -> float:
    """Euclidean distance between the two group centroids of unit-normalized vectors."""
    v = vectors / np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-12)
    a, b = np.unique(groups)[:2]
    return float(np.linalg.norm(v[groups == a].mean(0) - v[groups == b].mean(0)))
