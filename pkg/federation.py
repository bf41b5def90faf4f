"""
FedAvg orchestration, centralized baselines and server-side fine-tuning
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from sklearn.utils.class_weight import compute_class_weight

from config import (
    ClassifierSpec,
    ConfigError,
    FedConfig,
    FineTuneConfig,
    N_CLASSES,
)
from data_loader import ClientShard, DataError, WindowSet
from evaluation import confusion, macro_f1
from models import (
    DEFAULT_AE_SPEC,
    DEFAULT_CLASSIFIER_SPEC,
    ae_forward,
    build_autoencoder,
    build_classifier_from_encoder,
    classifier_forward,
    encode_windows,
    encoder_names,
    head_forward,
    head_names,
    predict_logits,
    reconstruction_loss,
)
from utils.autodiff import Tensor, backward, mse_loss, weighted_softmax_cross_entropy
from utils.optim import ADAM, SGD, init_optimizer_state, optimizer_step
from utils.params import ParamSet, save_params
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)

CONVENTIONAL = "conventional"
CONVENTIONAL_AE = "conventional_ae"


class AggregationError(ValueError):
    """FedAvg inputs are not aggregatable"""


class EmptyShardError(DataError):
    """Client has no training windows"""


class NonFiniteLossError(ArithmeticError):
    """Training produced a NaN or infinite loss"""


class FineTuneError(ValueError):
    """Labeled pool cannot support supervised fine-tuning"""


@dataclass
class RoundRecord:
    """Telemetry of one communication round"""
    round: int
    client_loss_mean: float
    client_loss_std: float
    server_loss: float
    bytes_down: int
    bytes_up: int
    participants: int = 0
    skipped: int = 0

    def to_json(self):
        """Plain dict with NaN losses as None"""
        return {k: (None if isinstance(v, float) and v != v else v) for k, v in asdict(self).items()}


@dataclass
class FineTuneResult:
    """Classifier after fine-tuning plus its per-epoch history"""
    params: ParamSet
    class_weights: np.ndarray
    history: List[dict] = field(default_factory=list)

    def history_frame(self):
        return pd.DataFrame(self.history, columns=["epoch", "loss", "train_macro_f1"])


def round_records_frame(records):
    columns = ["round", "client_loss_mean", "client_loss_std", "server_loss", "bytes_down", "bytes_up"]
    return pd.DataFrame([asdict(r) for r in records], columns=columns + ["participants", "skipped"])[columns]


# ============================================================
# AGGREGATION
# ============================================================
def fedavg_aggregate(models, weights, client_ids=None):
    """
    Weighted parameter average: sum_i (w_i / sum w) * p_i.

    Accumulates in float64 and visits models in ascending client-id order (list order if
    no ids are given) so the result does not depend on completion order.
    """
    if not models:
        raise AggregationError("no models to aggregate")
    if len(weights) != len(models):
        raise AggregationError(f"{len(models)} models but {len(weights)} weights")
    weights = [float(w) for w in weights]
    if any(not np.isfinite(w) or w <= 0 for w in weights):
        raise AggregationError(f"aggregation weights must be positive, got {weights}")
    if client_ids is not None:
        if len(client_ids) != len(models):
            raise AggregationError("client_ids must match models")
        order = sorted(range(len(models)), key=lambda i: client_ids[i])
    else:
        order = list(range(len(models)))

    reference = models[order[0]]
    for i in order[1:]:
        if not models[i].same_structure(reference):
            raise AggregationError("models are not structurally identical")

    total = float(np.sum([weights[i] for i in order], dtype=np.float64))
    result = []
    for name, tensor in reference:
        acc = np.zeros(tensor.shape, dtype=np.float64)
        for i in order:
            acc += (weights[i] / total) * models[i][name].data.astype(np.float64)
        result.append((name, Tensor(acc.astype(tensor.dtype), requires_grad=tensor.requires_grad, dtype=tensor.dtype)))
    return ParamSet(result)


# ============================================================
# LOCAL TRAINING
# ============================================================
def _check_finite(loss, context):
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss ({loss}) during {context}")


def sgd_epochs(params, windows, epochs, lr, batch_size, rng, spec=DEFAULT_AE_SPEC, context="training"):
    """
    Minibatch SGD on MSE reconstruction, in place. Fresh shuffle every epoch.

    Returns:
        list[float]: mean training loss per epoch
    """
    state = init_optimizer_state(SGD, lr, params)
    epoch_losses = []
    n = len(windows)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = Tensor(windows[idx], dtype=params.tensors()[0].dtype)
            params.zero_grad()
            recon, _ = ae_forward(params, batch, spec)
            loss = mse_loss(recon, batch)
            value = float(loss.data)
            _check_finite(value, context)
            backward(loss)
            optimizer_step(params, state)
            total += value * len(idx)
        epoch_losses.append(total / n)
    params.zero_grad()
    if not params.is_finite():
        raise NonFiniteLossError(f"non-finite parameters after {context}")
    return epoch_losses


def local_train(params, shard, cfg, round_seed, spec=DEFAULT_AE_SPEC):
    """
    One client's local update: `cfg.local_epochs` of minibatch SGD on its unlabeled windows.

    The input ParamSet is not mutated.

    Returns:
        tuple: (updated ParamSet, AE MSE on the client's local test windows)
    """
    if shard.n_train == 0:
        raise EmptyShardError(f"client {shard.client_id} has no training windows")
    local = params.copy(requires_grad=True)
    rng = np.random.default_rng(round_seed)
    sgd_epochs(local, shard.train.windows, cfg.local_epochs, cfg.client_lr, cfg.client_batch, rng, spec,
               context=f"local training of {shard.client_id}")
    local.set_requires_grad(params.tensors()[0].requires_grad)
    test_loss = reconstruction_loss(local, shard.test.windows, spec)
    return local, test_loss


def _sample_participants(clients, cfg, round_no):
    n = len(clients)
    k = max(1, int(round(cfg.client_fraction * n)))
    if k >= n:
        return list(clients)
    rng = np.random.default_rng(derive_seed(cfg.seed, "participants", round_no))
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    return [clients[i] for i in chosen]


def run_federated_pretraining(layout, cfg, spec=DEFAULT_AE_SPEC, workers=1,
                              checkpoint_dir=None, checkpoint_every=0, init_params=None,
                              on_round: Optional[Callable[[RoundRecord], None]] = None):
    """
    FedAvg pre-training of the autoencoder.

    Each round: sample participants, broadcast, train locally (optionally in parallel),
    aggregate with unlabeled-sample-count weights, evaluate the aggregated model on the
    combined client test set and emit a RoundRecord.

    Returns:
        tuple: (final ParamSet, list[RoundRecord])
    """
    if not layout.clients:
        raise ConfigError("federated pre-training needs at least one client")
    cfg.validate(len(layout.clients))
    clients = sorted(layout.clients, key=lambda c: c.client_id)
    global_params = init_params.copy() if init_params is not None else build_autoencoder(spec, cfg.seed)
    byte_size = global_params.byte_size
    records = []

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for round_no in range(1, cfg.rounds + 1):
            participants = _sample_participants(clients, cfg, round_no)
            seeds = [derive_seed(cfg.seed, round_no, c.client_id) for c in participants]

            def train_one(args):
                shard, seed = args
                if shard.n_train == 0:
                    return shard, None
                return shard, local_train(global_params, shard, cfg, seed, spec)

            jobs = list(zip(participants, seeds))
            outcomes = list(executor.map(train_one, jobs)) if executor else [train_one(j) for j in jobs]

            models, weights, ids, test_losses = [], [], [], []
            skipped = 0
            for shard, outcome in outcomes:
                if outcome is None:
                    logger.warning(f"Round {round_no}: client {shard.client_id} has no training windows, skipped")
                    skipped += 1
                    continue
                local, test_loss = outcome
                models.append(local)
                weights.append(shard.n_train)
                ids.append(shard.client_id)
                if np.isfinite(test_loss):
                    test_losses.append(test_loss)

            if models:
                global_params = fedavg_aggregate(models, weights, ids)
            else:
                logger.warning(f"Round {round_no}: no client trained, global model unchanged")

            server_loss = reconstruction_loss(global_params, layout.server_test.windows, spec)
            _check_finite(server_loss, f"server evaluation in round {round_no}")
            losses = np.asarray(test_losses, dtype=np.float64)
            record = RoundRecord(
                round=round_no,
                client_loss_mean=float(losses.mean()) if losses.size else float("nan"),
                client_loss_std=float(losses.std()) if losses.size else float("nan"),
                server_loss=float(server_loss),
                bytes_down=len(participants) * byte_size,
                bytes_up=len(participants) * byte_size,
                participants=len(participants),
                skipped=skipped,
            )
            records.append(record)
            logger.info(
                f"Round {round_no}/{cfg.rounds}: client loss {record.client_loss_mean:.5f} "
                f"+- {record.client_loss_std:.5f}, server loss {record.server_loss:.5f}, "
                f"{record.participants} participants"
            )
            if on_round is not None:
                on_round(record)
            if checkpoint_dir and checkpoint_every and round_no % checkpoint_every == 0:
                save_params(global_params, f"{checkpoint_dir}/round_{round_no:04d}.faes")
    finally:
        if executor:
            executor.shutdown(wait=True)

    return global_params, records


def communication_cost(byte_size, rounds, participants_per_round=1):
    """Bytes each way after `rounds` rounds: rounds * participants * byte_size"""
    return rounds * participants_per_round * byte_size


# ============================================================
# FINE-TUNING
# ============================================================
def balanced_class_weights(labels, n_classes=N_CLASSES):
    """
    n / (k_present * n_c) for each present class c; absent classes get 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    weights = np.zeros(n_classes, dtype=np.float64)
    weights[present] = compute_class_weight("balanced", classes=present, y=labels)
    return weights


def fine_tune(encoder_params, server_labeled, cfg, spec=DEFAULT_AE_SPEC, head=DEFAULT_CLASSIFIER_SPEC):
    """
    Build a classifier from the encoder and train it with Adam on the labeled pool.

    With `cfg.freeze_encoder` the encoder is left bitwise unchanged and only the dense head
    is trained, on latents computed once up front.

    Returns:
        FineTuneResult
    """
    if server_labeled.labels is None or len(server_labeled) == 0:
        raise FineTuneError("fine-tuning needs a labeled, non-empty pool")
    labels = server_labeled.labels
    present = np.unique(labels)
    if len(present) < 2:
        raise FineTuneError(f"labeled pool has a single class ({present.tolist()}); need at least 2")

    if cfg.class_weighting == "balanced":
        class_weights = balanced_class_weights(labels, head.n_classes)
    else:
        class_weights = np.zeros(head.n_classes)
        class_weights[present] = 1.0

    params = build_classifier_from_encoder(encoder_params, cfg.seed, spec, head)
    trainable = head_names(spec, head) if cfg.freeze_encoder else params.names()
    frozen = [] if not cfg.freeze_encoder else encoder_names(spec)
    params.set_requires_grad(False, frozen)
    state = init_optimizer_state(ADAM, cfg.lr, params, trainable)
    rng = np.random.default_rng(derive_seed(cfg.seed, "finetune"))

    windows = server_labeled.windows
    features = encode_windows(params, windows, spec) if cfg.freeze_encoder else None
    n = len(labels)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            params.zero_grad()
            if cfg.freeze_encoder:
                logits = head_forward(params, Tensor(features[idx]))
            else:
                logits = classifier_forward(params, Tensor(windows[idx]), spec)
            loss = weighted_softmax_cross_entropy(logits, labels[idx], class_weights)
            value = float(loss.data)
            _check_finite(value, f"fine-tuning epoch {epoch}")
            backward(loss)
            optimizer_step(params, state, trainable)
            total += value * len(idx)

        if cfg.freeze_encoder:
            preds = _head_predictions(params, features)
        else:
            preds = predict_logits(params, windows, spec).argmax(axis=1)
        train_f1 = macro_f1(confusion(labels, preds, head.n_classes))
        history.append({"epoch": epoch, "loss": total / n, "train_macro_f1": train_f1})
        if epoch == 1 or epoch % 10 == 0 or epoch == cfg.epochs:
            logger.info(f"Fine-tune epoch {epoch}/{cfg.epochs}: loss {total / n:.5f}, train macro-F1 {train_f1:.4f}")

    params.zero_grad()
    params.set_requires_grad(True)
    return FineTuneResult(params=params, class_weights=class_weights, history=history)


def _head_predictions(params, features, batch_size=1024):
    inference = params.copy(requires_grad=False)
    preds = []
    for start in range(0, len(features), batch_size):
        preds.append(head_forward(inference, Tensor(features[start:start + batch_size])).data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ============================================================
# CENTRALIZED BASELINES
# ============================================================
def train_autoencoder_centrally(layout, fed_cfg, spec=DEFAULT_AE_SPEC):
    """
    Autoencoder trained at the server on the pooled unlabeled client windows.

    Budget matches the federated arm: rounds * local_epochs passes, same lr and batch.

    Returns:
        tuple: (ParamSet, list of per-round-equivalent dicts with train/test loss)
    """
    pooled = layout.pooled_unlabeled()
    if len(pooled) == 0:
        raise EmptyShardError("no unlabeled client windows to pre-train on")
    params = build_autoencoder(spec, fed_cfg.seed)
    rng = np.random.default_rng(derive_seed(fed_cfg.seed, "centralized_ae"))
    curve = []
    for block in range(1, fed_cfg.rounds + 1):
        losses = sgd_epochs(params, pooled.windows, fed_cfg.local_epochs, fed_cfg.client_lr,
                            fed_cfg.client_batch, rng, spec, context="centralized AE training")
        test_loss = reconstruction_loss(params, layout.server_test.windows, spec)
        _check_finite(test_loss, "centralized AE evaluation")
        curve.append({"round": block, "train_loss": losses[-1], "server_loss": test_loss})
        logger.info(f"Centralized AE {block}/{fed_cfg.rounds}: train {losses[-1]:.5f}, test {test_loss:.5f}")
    return params, curve


def run_centralized_baseline(layout, mode, fed_cfg: FedConfig, ft_cfg: FineTuneConfig, spec=DEFAULT_AE_SPEC,
                             head: ClassifierSpec = DEFAULT_CLASSIFIER_SPEC):
    """
    Centralized baselines.

    conventional: the full classifier trained from random initialization on the server pool.
    conventional_ae: AE pre-trained centrally on the pooled unlabeled windows, then fine-tuned
    exactly like the federated arm.

    Returns:
        tuple: (FineTuneResult, centralized AE curve or [])
    """
    if mode == CONVENTIONAL:
        random_ae = build_autoencoder(spec, ft_cfg.seed)
        cfg = FineTuneConfig(**{**asdict(ft_cfg), "freeze_encoder": False})
        return fine_tune(random_ae, layout.server_labeled, cfg, spec, head), []
    if mode == CONVENTIONAL_AE:
        ae_params, curve = train_autoencoder_centrally(layout, fed_cfg, spec)
        return fine_tune(ae_params, layout.server_labeled, ft_cfg, spec, head), curve
    raise ConfigError(f"unknown baseline mode {mode!r}")
