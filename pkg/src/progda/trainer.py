"""Three-phase training loop: source pre-training, progressive joint training
with clustering rounds, and target-only fine-tuning."""

from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import clustering, evaluator, losses, memory, schedule
from .clustering import DbscanParams, PseudoLabeling
from .data import Dataset, pk_sample
from .losses import ClassifierHead, LossValue
from .numerics import EncoderState, backprop, encode, init_encoder
from .schedule import SchedulePolicy

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    schedule: SchedulePolicy = SchedulePolicy()
    delta: float = 0.1
    gamma: float = 0.7
    tau: float = 0.07
    momentum: float = 0.99
    margin: float = 0.3
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 5e-4
    dbscan: DbscanParams = DbscanParams()
    queue_capacity: int = 1024
    P: int = 4
    K: int = 4
    iters_per_epoch: int = 20
    epochs_per_cluster_round: int = 2
    seed: int = 0
    ccl_include_positive: bool = True
    ccl_pairs: str = "cluster"
    instance_aug_sigma: float = 0.1
    hidden: int = 32
    out_dim: int = 16

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must be in [0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.ccl_pairs not in ("cluster", "instance"):
            raise ValueError("ccl_pairs must be 'cluster' or 'instance'")
        if self.queue_capacity < 1 or self.P < 2 or self.K < 2:
            raise ValueError("queue_capacity >= 1, P >= 2 and K >= 2 are required")
        if self.iters_per_epoch < 1 or self.epochs_per_cluster_round < 1:
            raise ValueError("iters_per_epoch and epochs_per_cluster_round must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lambda_s: float
    lambda_t: float
    loss_source: float
    loss_ccl: float
    loss_spa: float
    loss_fre: float
    round_id: int
    num_clusters: int | None = None
    outlier_fraction: float | None = None
    nmi: float | None = None
    bcubed_f: float | None = None
    mAP: float | None = None
    rank1: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    online: EncoderState
    ema: EncoderState
    records: list[EpochRecord]
    source_head: ClassifierHead
    labeling: PseudoLabeling | None = None


class Monitor:
    """Holds the ground truth the trainer must not see: hidden target labels
    and the labeled held-out split used for retrieval metrics."""

    def __init__(self, target_labels, test: Dataset | None = None, dbscan: DbscanParams = DbscanParams(),
                 query_every: int = 5):
        self.target_labels = np.asarray(target_labels)
        self.test = test
        self.dbscan = dbscan
        if test is not None:
            self.query_idx, self.gallery_idx = evaluator.split_query_gallery(test.labels, query_every)

    def cluster_stats(self, labeling: PseudoLabeling) -> dict:
        return {
            "num_clusters": labeling.num_clusters,
            "outlier_fraction": labeling.outlier_fraction,
            "nmi": clustering.nmi(labeling.assignment, self.target_labels),
            "bcubed_f": clustering.bcubed_f(labeling.assignment, self.target_labels),
        }

    def retrieval(self, ema: EncoderState) -> dict:
        if self.test is None:
            return {}
        return retrieval_metrics(ema, self.test, self.query_idx, self.gallery_idx)


def retrieval_metrics(state: EncoderState, test: Dataset, query_idx, gallery_idx) -> dict:
    feats = encode(state, test.inputs)
    res = evaluator.evaluate(feats[query_idx], test.labels[query_idx], test.cameras[query_idx],
                             feats[gallery_idx], test.labels[gallery_idx], test.cameras[gallery_idx],
                             test.instance_ids[gallery_idx])
    return {"mAP": res.mAP, "rank1": res.rank1}


class _Optimizer:
    """Plain gradient descent, or Adam with L2 weight decay."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def reset(self, prefix: str):
        for k in [k for k in self.state if k.startswith(prefix)]:
            del self.state[k]

    def step(self, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        lr = self.cfg.learning_rate
        if self.cfg.optimizer == "sgd":
            return param - lr * grad
        grad = grad + self.cfg.weight_decay * param
        b1, b2 = self.cfg.adam_beta1, self.cfg.adam_beta2
        m, v, t = self.state.get(name, (np.zeros_like(param), np.zeros_like(param), 0))
        t += 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        self.state[name] = (m, v, t)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        return param - lr * m_hat / (np.sqrt(v_hat) + 1e-8)


@dataclass
class StepLog:
    epoch: int
    phase: str
    source_ids: np.ndarray
    target_ids: np.ndarray


@dataclass
class Hooks:
    on_step: Callable[["Trainer"], None] | None = None
    on_batch: Callable[[StepLog], None] | None = None
    on_ccl_batch: Callable[[np.ndarray, list[np.ndarray], "Trainer"], None] | None = None
    on_epoch: Callable[[EpochRecord], None] | None = None


def _amplitude_centroids(features: np.ndarray, labeling: PseudoLabeling) -> np.ndarray:
    from .fourier import amplitude_of
    return clustering.centroids_of(amplitude_of(features), labeling.assignment, labeling.num_clusters)


class Trainer:
    def __init__(self, source: Dataset, target: Dataset, config: TrainConfig,
                 monitor: Monitor | None = None, hooks: Hooks | None = None):
        if source.labels is None:
            raise ValueError("source data must be labeled")
        # Target labels are never read; strip them defensively.
        self.source = source
        self.target = target.unlabeled() if target.labels is not None else target
        self.cfg = config
        self.monitor = monitor
        self.hooks = hooks or Hooks()

        self.rng = np.random.default_rng(config.seed)
        self.online = init_encoder(source.dim, config.out_dim, config.hidden, seed=config.seed)
        self.ema = self.online.copy()
        self.source_classes = np.unique(source.labels)
        self.source_label_index = np.searchsorted(self.source_classes, source.labels)
        self.source_head = losses.random_head(len(self.source_classes), config.out_dim, self.rng)
        self.target_head: ClassifierHead | None = None
        self.fourier_head: ClassifierHead | None = None
        self.queue = memory.NegativeQueue(config.out_dim, config.queue_capacity, round_id=0)
        self.labeling: PseudoLabeling | None = None
        self.round_id = 0
        self.failed_rounds = 0
        self.opt = _Optimizer(config)

    # -- clustering rounds --------------------------------------------------

    def start_round(self) -> bool:
        self.round_id += 1
        feats = encode(self.ema, self.target.inputs)
        lab = clustering.dbscan(feats, self.cfg.dbscan, round_id=self.round_id)
        self.queue.refresh(self.round_id)
        if lab.num_clusters < 2:
            self.failed_rounds += 1
            log.warning("clustering round %d produced %d clusters; skipping round", self.round_id, lab.num_clusters)
            self.labeling = None
            self.target_head = self.fourier_head = None
            if self.failed_rounds >= 3:
                raise TrainingAborted(f"{self.failed_rounds} consecutive degenerate clustering rounds "
                                      f"(last: {lab.num_clusters} clusters, "
                                      f"{lab.outlier_fraction:.0%} outliers, eps={self.cfg.dbscan.eps})")
            return False
        self.failed_rounds = 0
        self.labeling = lab
        self.target_head = losses.init_head_from_centroids(lab)
        self.fourier_head = losses.init_head_from_centroids(_amplitude_centroids(feats, lab))
        self.opt.reset("tgt_head.")
        self.opt.reset("fre_head.")
        return True

    # -- loss pieces --------------------------------------------------------

    def _source_terms(self, idx) -> tuple[losses.SourceTerms, np.ndarray]:
        x = self.source.inputs[idx]
        y = self.source_label_index[idx]
        f = encode(self.online, x)
        ce = losses.cross_entropy(self.source_head, f, y)
        tri = losses.triplet_loss(f, y, self.cfg.margin)
        ce = _rename(ce, {"features": "src.features", "head.weight": "src_head.weight", "head.bias": "src_head.bias"})
        tri = _rename(tri, {"features": "src.features"})
        return losses.SourceTerms(ce, tri), x

    def _ccl(self, f: np.ndarray, x: np.ndarray, y: np.ndarray, ids: np.ndarray) -> tuple[LossValue, np.ndarray, np.ndarray]:
        """Contrastive term plus the (features, labels) to enqueue afterwards."""
        if self.cfg.ccl_pairs == "instance":
            noisy = x + self.rng.normal(0.0, self.cfg.instance_aug_sigma, size=x.shape)
            positives = encode(self.ema, noisy)
            keys, key_labels = positives, ids
            anchor_labels = ids
            pos_idx = None
        else:
            pos_idx = losses.hardest_positive_indices(f, y)
            positives = f[pos_idx]
            keys, key_labels = None, y  # encoded by the momentum encoder after its update
            anchor_labels = y

        negs = [self.queue.negatives_for(lab) for lab in anchor_labels]
        valid = np.array([n.shape[0] > 0 for n in negs])
        if pos_idx is not None:
            valid &= pos_idx >= 0
        if self.hooks.on_ccl_batch is not None:
            self.hooks.on_ccl_batch(anchor_labels, negs, self)
        if not valid.any():
            return LossValue(0.0), keys, key_labels
        rows = np.flatnonzero(valid)
        batch = losses.ContrastiveBatch(f[rows], positives[rows], [negs[r] for r in rows], anchor_labels[rows])
        lv = losses.ccl_loss(batch, self.cfg.tau, self.cfg.ccl_include_positive)
        g = np.zeros_like(f)
        g[rows] += lv.grads["anchors"]
        if pos_idx is not None:
            np.add.at(g, pos_idx[rows], lv.grads["positives"])
        return LossValue(lv.value, {"tgt.features": g}), keys, key_labels

    def _target_terms(self, idx):
        cfg = self.cfg
        x = self.target.inputs[idx]
        y = self.labeling.assignment[idx]
        ids = self.target.instance_ids[idx]
        f = encode(self.online, x)
        terms = losses.TargetTerms()
        enqueue = None
        if cfg.delta > 0:
            terms.ccl, keys, key_labels = self._ccl(f, x, y, ids)
            enqueue = (keys, key_labels)
        if cfg.gamma > 0:
            ce = losses.cross_entropy(self.target_head, f, y)
            terms.ce = _rename(ce, {"features": "tgt.features", "head.weight": "tgt_head.weight",
                                    "head.bias": "tgt_head.bias"})
            terms.triplet = _rename(losses.triplet_loss(f, y, cfg.margin), {"features": "tgt.features"})
        if cfg.gamma < 1:
            fre = losses.fourier_ce(self.fourier_head, f, y)
            terms.fourier_ce = _rename(fre, {"features": "tgt.features", "head.weight": "fre_head.weight",
                                             "head.bias": "fre_head.bias"})
        return terms, x, enqueue

    # -- one optimisation step ----------------------------------------------

    def step(self, epoch: int, lam_s: float, lam_t: float) -> dict:
        cfg = self.cfg
        src_terms, tgt_terms = losses.SourceTerms(), losses.TargetTerms()
        xs = xt = None
        src_idx = tgt_idx = np.empty(0, dtype=np.int64)
        enqueue = None
        if lam_s > 0:
            src_idx = pk_sample(self.source_label_index, min(cfg.P, len(self.source_classes)), cfg.K, self.rng)
            src_terms, xs = self._source_terms(src_idx)
        if lam_t > 0 and self.labeling is not None:
            usable = np.unique(self.labeling.assignment[self.labeling.assignment >= 0]).size
            tgt_idx = pk_sample(self.labeling.assignment, min(cfg.P, usable), cfg.K, self.rng)
            tgt_terms, xt, enqueue = self._target_terms(tgt_idx)

        if self.hooks.on_batch is not None:
            self.hooks.on_batch(StepLog(epoch, schedule.phase_of(cfg.schedule, epoch),
                                        self.source.instance_ids[src_idx], self.target.instance_ids[tgt_idx]))

        total = losses.combined_loss(src_terms, tgt_terms, lam_s, lam_t, cfg.delta, cfg.gamma)
        grads = total.grads
        enc_grads = None
        for key, x in (("src.features", xs), ("tgt.features", xt)):
            if key in grads and x is not None:
                layer_grads, _ = backprop(self.online, x, grads[key])
                enc_grads = layer_grads if enc_grads is None else [
                    (a + c, b + d) for (a, b), (c, d) in zip(enc_grads, layer_grads)]
        if enc_grads is not None:
            self.online = EncoderState(
                [(self.opt.step(f"enc{i}.w", w, dw), self.opt.step(f"enc{i}.b", b, db))
                 for i, ((w, b), (dw, db)) in enumerate(zip(self.online.layers, enc_grads))],
                self.online.activation, self.online.normalize)
        for prefix, attr in (("src_head.", "source_head"), ("tgt_head.", "target_head"), ("fre_head.", "fourier_head")):
            head = getattr(self, attr)
            gw, gb = grads.get(prefix + "weight"), grads.get(prefix + "bias")
            if head is not None and gw is not None:
                setattr(self, attr, ClassifierHead(self.opt.step(prefix + "weight", head.weight, gw),
                                                   self.opt.step(prefix + "bias", head.bias, gb)))

        self.ema = memory.momentum_update(self.ema, self.online, cfg.momentum)
        if enqueue is not None:
            feats, labels = enqueue
            if feats is None:
                feats = encode(self.ema, xt)
            self.queue.enqueue(feats, labels, self.round_id)
        if self.hooks.on_step is not None:
            self.hooks.on_step(self)
        return {
            "source": src_terms.total().value,
            "ccl": tgt_terms.ccl.value,
            "spa": tgt_terms.spatial().value,
            "fre": tgt_terms.fourier_ce.value,
        }

    # -- main loop ----------------------------------------------------------

    def _round_starts_at(self, epoch: int) -> bool:
        offset = epoch - self.cfg.schedule.e1 - 1
        return offset >= 0 and offset % self.cfg.epochs_per_cluster_round == 0

    def _epoch_record(self, epoch, phase, lam_s, lam_t, sums) -> EpochRecord:
        n = self.cfg.iters_per_epoch
        rec = EpochRecord(epoch, phase, lam_s, lam_t, sums["source"] / n, sums["ccl"] / n,
                          sums["spa"] / n, sums["fre"] / n, self.round_id)
        if self.monitor is not None:
            lab = self.labeling
            if lab is None:
                lab = clustering.dbscan(encode(self.ema, self.target.inputs), self.cfg.dbscan)
            for k, v in {**self.monitor.cluster_stats(lab), **self.monitor.retrieval(self.ema)}.items():
                setattr(rec, k, v)
        return rec

    def run(self) -> TrainResult:
        policy = self.cfg.schedule
        records = []
        for epoch in range(1, policy.e3 + 1):
            lam_s, lam_t = schedule.weights_at(policy, epoch)
            phase = schedule.phase_of(policy, epoch)
            if lam_t > 0 and self._round_starts_at(epoch):
                self.start_round()
            sums = {"source": 0.0, "ccl": 0.0, "spa": 0.0, "fre": 0.0}
            for _ in range(self.cfg.iters_per_epoch):
                if lam_s == 0 and self.labeling is None:
                    break
                for k, v in self.step(epoch, lam_s, lam_t).items():
                    sums[k] += v
            rec = self._epoch_record(epoch, phase, lam_s, lam_t, sums)
            records.append(rec)
            if self.hooks.on_epoch is not None:
                self.hooks.on_epoch(rec)
            log.info("epoch %d %s lambda=(%.2f, %.2f) mAP=%s", epoch, phase, lam_s, lam_t, rec.mAP)
        return TrainResult(self.online, self.ema, records, self.source_head, self.labeling)


def _rename(lv: LossValue, mapping: dict[str, str]) -> LossValue:
    return LossValue(lv.value, {mapping[k]: g for k, g in lv.grads.items() if k in mapping})


def train(source: Dataset, target: Dataset, config: TrainConfig = TrainConfig(),
          monitor: Monitor | None = None, hooks: Hooks | None = None) -> TrainResult:
    return Trainer(source, target, config, monitor, hooks).run()


def baseline_config(config: TrainConfig) -> TrainConfig:
    """Two-stage schedule without the contrastive or Fourier terms."""
    policy = dataclasses.replace(config.schedule, kind="two_stage")
    return config.replace(schedule=policy, delta=0.0, gamma=1.0)


def run_baseline(source: Dataset, target: Dataset, config: TrainConfig = TrainConfig(),
                 monitor: Monitor | None = None, hooks: Hooks | None = None) -> TrainResult:
    return train(source, target, baseline_config(config), monitor, hooks)


# --- model file --------------------------------------------------------------

MAGIC = b"PGDA"
VERSION = 1
_ACT_CODES = {"tanh": 0, "identity": 1}


def save_model(state: EncoderState, path) -> None:
    """Binary layout (little endian): magic, version byte, activation byte,
    normalize byte, uint32 layer count, (uint32 out, uint32 in) per layer,
    then each layer's weight (row-major) and bias as float64."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBBI", VERSION, _ACT_CODES[state.activation], int(state.normalize), len(state.layers)))
        for w, _ in state.layers:
            fh.write(struct.pack("<II", *w.shape))
        for w, b in state.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_model(path) -> EncoderState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    version, act, norm, n_layers = struct.unpack_from("<BBBI", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 4 + struct.calcsize("<BBBI")
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", blob, off))
        off += 8
    layers = []
    for out_dim, in_dim in shapes:
        w = np.frombuffer(blob, "<f8", out_dim * in_dim, off).reshape(out_dim, in_dim).astype(np.float64)
        off += 8 * out_dim * in_dim
        b = np.frombuffer(blob, "<f8", out_dim, off).astype(np.float64)
        off += 8 * out_dim
        layers.append((w, b))
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in model file")
    activation = {v: k for k, v in _ACT_CODES.items()}[act]
    return EncoderState(layers, activation, bool(norm))
