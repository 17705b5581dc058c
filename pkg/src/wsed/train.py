"""Semi-supervised training: weak cross-entropy plus the VAT regularizer."""
from __future__ import annotations

import logging
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import gcrnn
from .autodiff import Tensor
from .gcrnn import GcrnnConfig
from .vat import PROB_EPS, VatConfig, vat_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 30
    labelled_per_batch: int = 15
    lr: float = 1e-3
    epochs: int = 100
    seed: int = 0
    literal_eq5: bool = False
    val_fraction: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.labelled_per_batch <= self.batch_size:
            raise ValueError("labelled_per_batch must lie in [1, batch_size]")


@dataclass
class TrainData:
    features: Mapping[str, np.ndarray]   # clip_id -> (T, F)
    weak_labels: Mapping[str, np.ndarray]  # clip_id -> (M,)
    labelled: Sequence[str]
    unlabelled: Sequence[str] = ()
    validation: Sequence[str] | None = None  # None -> seeded split of labelled


class Batch(NamedTuple):
    labelled: list[str]
    unlabelled: list[str]


@dataclass
class TrainResult:
    params: dict[str, ad.Parameter]        # best by held-out weak F1
    final_params: dict[str, ad.Parameter]
    metrics: list[dict] = field(default_factory=list)
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)


def weak_ce_loss(y: Tensor, labels: np.ndarray, literal_eq5: bool = False) -> Tensor:
    """Clip-level cross-entropy averaged over clips and summed over classes.

    With ``literal_eq5`` only the positive-label term is kept.
    """
    labels = np.asarray(labels, dtype=y.dtype)
    if y.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != labels.shape:
        raise ad.ShapeError(f"shape mismatch: {y.shape} vs {labels.shape}")
    y = ad.clip(y, PROB_EPS, 1 - PROB_EPS)
    ll = ad.log(y) * labels
    if not literal_eq5:
        ll = ll + ad.log(1.0 - y) * (1.0 - labels)
    return ad.tsum(ll) * (-1.0 / y.shape[0])


class MixedBatcher:
    """Seeded stream of labelled/unlabelled batches.

    One epoch is one pass over the labelled pool without replacement; the
    unlabelled pool is drawn from its own permutation that is refreshed when
    exhausted. Pools smaller than their quota are sampled with replacement.
    """

    def __init__(self, labelled: Sequence[str], unlabelled: Sequence[str],
                 config: TrainConfig, rng: np.random.Generator):
        if not labelled:
            raise ValueError("labelled pool is empty")
        self.labelled = list(labelled)
        self.unlabelled = list(unlabelled)
        self.rng = rng
        if self.unlabelled:
            self.n_lab = config.labelled_per_batch
            self.n_unl = config.batch_size - config.labelled_per_batch
        else:
            self.n_lab, self.n_unl = config.batch_size, 0
        self._unl_queue: list[str] = []
        for name, pool, quota in (("labelled", self.labelled, self.n_lab),
                                  ("unlabelled", self.unlabelled, self.n_unl)):
            if pool and len(pool) < quota:
                log.warning("%s pool (%d) smaller than batch quota (%d); sampling with replacement",
                            name, len(pool), quota)

    def _take_unlabelled(self) -> list[str]:
        if self.n_unl == 0:
            return []
        if len(self.unlabelled) < self.n_unl:
            idx = self.rng.integers(len(self.unlabelled), size=self.n_unl)
            return [self.unlabelled[i] for i in idx]
        if len(self._unl_queue) < self.n_unl:
            self._unl_queue = [self.unlabelled[i] for i in self.rng.permutation(len(self.unlabelled))]
        out, self._unl_queue = self._unl_queue[:self.n_unl], self._unl_queue[self.n_unl:]
        return out

    def epoch(self) -> Iterator[Batch]:
        if len(self.labelled) < self.n_lab:
            idx = self.rng.integers(len(self.labelled), size=self.n_lab)
            yield Batch([self.labelled[i] for i in idx], self._take_unlabelled())
            return
        perm = [self.labelled[i] for i in self.rng.permutation(len(self.labelled))]
        for b in range(len(perm) // self.n_lab):
            yield Batch(perm[b * self.n_lab:(b + 1) * self.n_lab], self._take_unlabelled())


def make_mixed_batches(labelled, unlabelled, config: TrainConfig, rng) -> Iterator[Batch]:
    return MixedBatcher(labelled, unlabelled, config, rng).epoch()


def clip_model(model_config: GcrnnConfig):
    def model(params, x):
        return gcrnn.forward(params, x, model_config).y
    return model


class LossTerms(NamedTuple):
    total: Tensor
    ce: float
    vat: float


def total_loss(x_lab: np.ndarray, l_lab: np.ndarray, x_unl: np.ndarray | None,
               params: Mapping[str, Tensor], model_config: GcrnnConfig, vat_config: VatConfig,
               rng: np.random.Generator, literal_eq5: bool = False) -> LossTerms:
    """Weak CE over the labelled clips plus lambda * summed VAT KL over all clips.

    With lambda = 0 the VAT branch is skipped and the RNG is not consumed.
    """
    out = gcrnn.forward(params, x_lab, model_config)
    ce = weak_ce_loss(out.y, l_lab, literal_eq5)
    if vat_config.lam == 0:
        return LossTerms(ce, float(ce.data), 0.0)
    p_ref = out.y.data
    x_all = x_lab
    if x_unl is not None and len(x_unl):
        frozen = {k: Tensor(v.data) for k, v in params.items()}
        p_unl = gcrnn.forward(frozen, x_unl, model_config).y.data
        p_ref = np.concatenate([p_ref, p_unl])
        x_all = np.concatenate([x_lab, x_unl])
    reg = vat_loss(clip_model(model_config), params, x_all, vat_config, rng, p_ref=p_ref)
    return LossTerms(ce + reg * vat_config.lam, float(ce.data), float(reg.data))


def weak_f1(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Macro F1 of thresholded clip predictions; empty classes count as 1."""
    pred = probs > threshold
    truth = labels.astype(bool)
    scores = []
    for c in range(labels.shape[1]):
        tp = np.sum(pred[:, c] & truth[:, c])
        fp = np.sum(pred[:, c] & ~truth[:, c])
        fn = np.sum(~pred[:, c] & truth[:, c])
        scores.append(1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def clip_probabilities(params, features: Sequence[np.ndarray], model_config: GcrnnConfig) -> np.ndarray:
    if not features:
        return np.zeros((0, model_config.n_classes))
    return np.stack([y for _, y in gcrnn.predict_batch(params, list(features), model_config)])


def split_validation(labelled: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    ids = sorted(labelled)
    n_val = int(round(fraction * len(ids)))
    if n_val == 0 or n_val >= len(ids):
        return ids, []
    perm = np.random.default_rng([seed, 7]).permutation(len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    vs = set(val)
    return [i for i in ids if i not in vs], val


def _copy(params):
    return {k: ad.Parameter(k, v.data.copy()) for k, v in params.items()}


def train(config: TrainConfig, data: TrainData, model_config: GcrnnConfig,
          vat_config: VatConfig, out_dir=None, params=None) -> TrainResult:
    """Adam on the total loss; keeps the checkpoint with the best held-out weak F1.

    Ties in held-out F1 prefer the later epoch. Writes ``checkpoint.wsedckpt``
    and ``metrics.tsv`` into ``out_dir`` when given.
    """
    dtype = np.dtype(config.dtype)
    if data.validation is None:
        train_ids, val_ids = split_validation(data.labelled, config.val_fraction, config.seed)
    else:
        train_ids, val_ids = sorted(data.labelled), sorted(data.validation)
    if params is None:
        params = gcrnn.init_params(model_config, seed=config.seed, dtype=dtype)
    batch_rng = np.random.default_rng([config.seed, 1])
    vat_rng = np.random.default_rng([config.seed, 2])
    batcher = MixedBatcher(train_ids, sorted(data.unlabelled), config, batch_rng)
    state = ad.AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    val_x = [data.features[i] for i in val_ids]
    val_l = np.stack([data.weak_labels[i] for i in val_ids]) if val_ids else None

    def feats(ids):
        return np.stack([data.features[i] for i in ids]).astype(dtype)

    metrics: list[dict] = []
    best, best_f1 = _copy(params), -1.0
    for epoch in range(1, config.epochs + 1):
        ce_sum = vat_sum = 0.0
        n_batches = 0
        for batch in batcher.epoch():
            l_lab = np.stack([data.weak_labels[i] for i in batch.labelled])
            x_unl = feats(batch.unlabelled) if batch.unlabelled else None
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    terms = total_loss(feats(batch.labelled), l_lab, x_unl, params, model_config,
                                       vat_config, vat_rng, config.literal_eq5)
                    if not np.isfinite(terms.total.data):
                        raise ad.NonFiniteError(f"non-finite loss at epoch {epoch}")
                    ad.zero_grad(params.values())
                    ad.backward(terms.total)
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                ad.adam_step(params, grads, state, lr=config.lr)
            except ad.NonFiniteError:
                # abort, keeping the last good checkpoint on disk
                if out is not None:
                    ad.save_checkpoint(out / "checkpoint.wsedckpt", best)
                raise
            ce_sum += terms.ce
            vat_sum += terms.vat
            n_batches += 1
        if val_ids:
            val_f1 = weak_f1(clip_probabilities(params, val_x, model_config), val_l)
        else:
            val_f1 = float("nan")
        row = {"epoch": epoch, "ce_loss": ce_sum / n_batches,
               "vat_loss": vat_sum / n_batches, "val_weak_f1": val_f1}
        metrics.append(row)
        log.info("epoch %d ce=%.5f vat=%.5f val_weak_f1=%.4f", epoch, row["ce_loss"],
                 row["vat_loss"], val_f1)
        if not val_ids or val_f1 >= best_f1:
            best, best_f1 = _copy(params), val_f1 if val_ids else best_f1
        if out is not None:
            write_metrics(out / "metrics.tsv", metrics)
    ad.zero_grad(params.values())
    if out is not None:
        ad.save_checkpoint(out / "checkpoint.wsedckpt", best)
    return TrainResult(best, params, metrics, list(train_ids), list(val_ids))


def write_metrics(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tce_loss\tvat_loss\tval_weak_f1\n")
        for r in rows:
            fh.write(f"{r['epoch']}\t{r['ce_loss']:.8f}\t{r['vat_loss']:.8f}\t{r['val_weak_f1']:.6f}\n")


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_manifest(path, settings: Mapping[str, object], dataset_hashes: Mapping[str, str]) -> None:
    lines = [f"git_describe={git_describe()}"]
    lines += [f"{k}={v}" for k, v in sorted(settings.items())]
    lines += [f"dataset_hash.{k}={v}" for k, v in sorted(dataset_hashes.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def config_items(prefix: str, cfg) -> dict[str, object]:
    return {f"{prefix}.{k}": v for k, v in asdict(cfg).items()}
