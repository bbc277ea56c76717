"""Federated training engine: local rounds, aggregation, scheduling, FLOPs.

Each user owns a model copy and a derived RNG stream, trains locally with
the mixed clean/adversarial loss, and uploads parameters for weighted
averaging. fedbn aggregation excludes every dual-BN quantity so BN state
stays local; fedavg averages everything.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adversary import AttackConfig, pgd_attack
from .datagen import LabeledDataset
from .errors import ArgumentError, DimensionError
from .nn import Model, clone_model, loss_and_grad, one_hot, sgd_step

DBN_FIELDS = ("clean_mean", "clean_var", "noise_mean", "noise_var",
              "weight", "bias")

_CKPT_MAGIC = b"FPCK"
_CKPT_VERSION = 1


@dataclass
class FederationConfig:
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-2
    aggregation_mode: str = "fedbn"  # fedavg | fedbn
    use_dbn: bool = True
    use_detector: bool = True
    use_copy: bool = True
    use_debias: bool = True
    use_reweight: bool = True
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0
    iters_per_round: int = None  # None -> one pass over the local data

    def __post_init__(self):
        if self.rounds < 0:
            raise ArgumentError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ArgumentError("local_epochs must be >= 1")
        if self.batch_size < 2:
            raise ArgumentError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ArgumentError("lr must be > 0")
        if self.aggregation_mode not in ("fedavg", "fedbn"):
            raise ArgumentError(f"unknown aggregation {self.aggregation_mode!r}")


@dataclass
class UserState:
    user_id: int
    domain_id: int
    q: float                       # 0 = ST user, 0.5 = AT user
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    model: Model
    seed: int = 0
    train_flops: int = 0
    aux_flops: int = 0             # propagation + detector fitting
    detector: object = None
    best_metric: float = -1.0
    best_model: Model = None

    def __post_init__(self):
        if self.q not in (0.0, 0.5):
            raise ArgumentError("q must be 0 or 0.5")
        if min(len(self.train), len(self.val), len(self.test)) < 1:
            raise ArgumentError("datasets must be non-empty")

    def rng(self, round_idx: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.user_id, round_idx])

    @property
    def classes(self) -> int:
        for spec in reversed(self.model.layers):
            if spec[0] == "linear":
                return spec[2]
        raise ArgumentError("model has no linear layer")


def count_flops(layer: tuple, batch: int, kind: str = "forward") -> int:
    """Add-or-multiply count for one layer pass.

    Convention: linear forward is 2*B*d_in*d_out, dbn forward 6*B*p,
    backward twice the layer's forward cost.
    """
    if batch <= 0:
        raise ArgumentError("batch must be positive")
    name = layer[0]
    if name == "linear":
        fwd = 2 * batch * layer[1] * layer[2]
    elif name == "dbn":
        fwd = 6 * batch * layer[1]
    elif name == "relu":
        fwd = 0
    else:
        raise ArgumentError(f"unknown layer {name!r}")
    if kind == "forward":
        return fwd
    if kind == "backward":
        return 2 * fwd
    raise ArgumentError(f"unknown pass kind {kind!r}")


def model_flops(model: Model, batch: int, kind: str = "forward") -> int:
    return sum(count_flops(spec, batch, kind) for spec in model.layers)


def trainable_snapshot(model: Model) -> dict:
    """Copies of all trainable parameters, linear and dbn affine."""
    out = {k: v.copy() for k, v in model.params.items()}
    for name, st in model.dbn_states.items():
        out[f"{name}.w"] = st.weight.copy()
        out[f"{name}.b"] = st.bias.copy()
    return out


def local_train_round(user: UserState, global_params: dict,
                      cfg: FederationConfig, round_idx: int) -> tuple:
    """One local round per the user-training procedure; returns (user, mean loss).

    Per batch: clean loss on the clean BN path; AT users additionally
    attack the batch (eval mode, clean path) and take the adversarial loss
    on the noise path, mixing L = (1-q) L_clean + q L_adv before a single
    SGD step.
    """
    if global_params is not None:
        load_params(user.model, global_params, cfg.aggregation_mode)
    model = user.model
    rng = user.rng(round_idx)
    n = len(user.train)
    B = cfg.batch_size
    adv_h = 1 if cfg.use_dbn else 0
    fwd = model_flops(model, B)
    losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        batches = [order[i:i + B] for i in range(0, n, B)]
        # a trailing 1-sample batch has no defined batch variance
        batches = [bi for bi in batches if len(bi) >= 2]
        if cfg.iters_per_round is not None:
            while len(batches) < cfg.iters_per_round:
                batches = batches + batches
            batches = batches[:cfg.iters_per_round]
        for idx in batches:
            x, y = user.train.x[idx], user.train.y[idx]
            y_oh = one_hot(y, user.classes)
            model.set_mode(h=0, training=True)
            loss_c, grads, _ = loss_and_grad(model, x, y_oh)
            user.train_flops += 3 * model_flops(model, len(idx))
            loss = loss_c
            if user.q > 0:
                model.set_mode(h=0, training=False)
                x_adv = pgd_attack(model, x, y, cfg.attack, rng)
                user.train_flops += (3 * model_flops(model, len(idx))
                                     * cfg.attack.steps)
                model.set_mode(h=adv_h, training=True)
                loss_a, grads_a, _ = loss_and_grad(model, x_adv, y_oh)
                user.train_flops += 3 * model_flops(model, len(idx))
                loss = (1 - user.q) * loss_c + user.q * loss_a
                grads = {k: (1 - user.q) * grads[k] + user.q * grads_a[k]
                         for k in grads}
            sgd_step(model, grads, cfg.lr)
            losses.append(loss)
    model.set_mode(h=0, training=False)
    return user, float(np.mean(losses)) if losses else 0.0


def aggregate(users: list, mode: str = "fedbn") -> dict:
    """Dataset-size weighted average of uploaded parameters.

    fedavg averages everything including dbn affine and both statistic
    paths; fedbn averages only non-dbn parameters.
    """
    if not users:
        raise ArgumentError("no users to aggregate")
    ref = users[0].model
    for u in users[1:]:
        if u.model.layers != ref.layers:
            raise DimensionError("users have mismatched architectures")
    sizes = np.array([len(u.train) for u in users], dtype=np.float64)
    a = sizes / sizes.sum()
    out = {}
    for key in ref.params:
        out[key] = sum(w * u.model.params[key] for w, u in zip(a, users))
    if mode == "fedavg":
        for name in ref.dbn_states:
            for fld in DBN_FIELDS:
                out[f"{name}.{fld}"] = sum(
                    w * getattr(u.model.dbn_states[name], fld)
                    for w, u in zip(a, users))
    return out


def load_params(model: Model, global_params: dict, mode: str = "fedbn"):
    """Install aggregated parameters; fedbn leaves all dbn state local."""
    for key in model.params:
        if key in global_params:
            model.params[key] = global_params[key].copy()
    if mode == "fedavg":
        for name, st in model.dbn_states.items():
            for fld in DBN_FIELDS:
                key = f"{name}.{fld}"
                if key in global_params:
                    setattr(st, fld, global_params[key].copy())
    return model


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, h: int = 0) -> float:
    model.set_mode(h=h, training=False)
    from .nn import predict
    return float(np.mean(predict(model, x) == y))


def clean_and_robust_accuracy(model: Model, x: np.ndarray, y: np.ndarray,
                              atk: AttackConfig) -> tuple:
    """(SA, RA) with the attack generated white-box on the clean BN path."""
    model.set_mode(h=0, training=False)
    sa = accuracy(model, x, y, h=0)
    x_adv = pgd_attack(model, x, y, atk)
    ra = accuracy(model, x_adv, y, h=0)
    return sa, ra


def run_federated_training(users: list, cfg: FederationConfig,
                           workers: int = 1, eval_cap: int = 64,
                           select_best: bool = True) -> tuple:
    """rounds x (parallel local rounds -> aggregate -> redistribute).

    History rows are (round, user_id, domain_id, group, loss, SA, RA,
    flops) with SA/RA measured on a capped validation subsample against
    the clean BN path. Deterministic for a fixed seed at any worker count.
    Tracks the best per-user round (AT users by RA, ST by SA) when
    select_best is set.
    """
    if not users:
        raise ArgumentError("need at least one user")
    global_params = None
    history = []
    for rnd in range(cfg.rounds):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(
                    lambda u: local_train_round(u, global_params, cfg, rnd),
                    users))
        else:
            results = [local_train_round(u, global_params, cfg, rnd)
                       for u in users]
        users = [u for u, _ in results]
        losses = [l for _, l in results]
        global_params = aggregate(users, cfg.aggregation_mode)
        for u in users:
            load_params(u.model, global_params, cfg.aggregation_mode)
        for u, loss in zip(users, losses):
            cap = min(eval_cap, len(u.val))
            sa, ra = clean_and_robust_accuracy(
                u.model, u.val.x[:cap], u.val.y[:cap], cfg.attack)
            group = "AT" if u.q > 0 else "ST"
            history.append({"round": rnd, "user_id": u.user_id,
                            "domain_id": u.domain_id, "group": group,
                            "loss": loss, "SA": sa, "RA": ra,
                            "flops": u.train_flops})
            if select_best:
                metric = ra if u.q > 0 else sa
                if metric > u.best_metric:
                    u.best_metric = metric
                    u.best_model = clone_model(u.model)
    return users, history


def restore_best_models(users: list):
    """Swap in each user's best-round checkpoint, when one was tracked."""
    for u in users:
        if u.best_model is not None:
            u.model = u.best_model
            u.best_model = None
    return users


# -- checkpointing -----------------------------------------------------------

def _pack_array(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    arr = np.asarray(arr, dtype=np.float64)
    return (struct.pack("<H", len(nb)) + nb
            + struct.pack("<B", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + arr.astype("<f8").tobytes(order="C"))


def _unpack_array(blob: bytes, off: int):
    (ln,) = struct.unpack_from("<H", blob, off)
    off += 2
    name = blob[off:off + ln].decode()
    off += ln
    (ndim,) = struct.unpack_from("<B", blob, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
    off += 8 * n
    return name, arr, off


def save_checkpoint(path, round_idx: int, global_params: dict,
                    users: list):
    """Versioned binary checkpoint: shared params + per-user dbn bundles
    and serialized detectors, resumable by round index."""
    from .detector import serialize_detector
    from .dual_bn import export_stats, serialize_stats

    parts = [_CKPT_MAGIC, struct.pack("<HI", _CKPT_VERSION, round_idx)]
    gp = global_params or {}
    parts.append(struct.pack("<I", len(gp)))
    for key in sorted(gp):
        parts.append(_pack_array(key, gp[key]))
    parts.append(struct.pack("<I", len(users)))
    for u in users:
        parts.append(struct.pack("<iid", u.user_id, u.domain_id, u.q))
        snap = trainable_snapshot(u.model)
        parts.append(struct.pack("<I", len(snap)))
        for key in sorted(snap):
            parts.append(_pack_array(key, snap[key]))
        bundle = serialize_stats(export_stats(u.model)) if u.model.dbn_states else b""
        parts.append(struct.pack("<I", len(bundle)))
        parts.append(bundle)
        det = serialize_detector(u.detector) if u.detector is not None else b""
        parts.append(struct.pack("<I", len(det)))
        parts.append(det)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> dict:
    """Checkpoint contents as plain dicts, keyed by user id."""
    from .detector import deserialize_detector
    from .dual_bn import deserialize_stats

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ArgumentError("bad checkpoint magic")
    version, round_idx = struct.unpack_from("<HI", blob, 4)
    if version != _CKPT_VERSION:
        raise ArgumentError(f"unsupported checkpoint version {version}")
    off = 10
    (n_gp,) = struct.unpack_from("<I", blob, off)
    off += 4
    global_params = {}
    for _ in range(n_gp):
        name, arr, off = _unpack_array(blob, off)
        global_params[name] = arr
    (n_users,) = struct.unpack_from("<I", blob, off)
    off += 4
    users = {}
    for _ in range(n_users):
        uid, did, q = struct.unpack_from("<iid", blob, off)
        off += struct.calcsize("<iid")
        (n_p,) = struct.unpack_from("<I", blob, off)
        off += 4
        params = {}
        for _ in range(n_p):
            name, arr, off = _unpack_array(blob, off)
            params[name] = arr
        (n_b,) = struct.unpack_from("<I", blob, off)
        off += 4
        stats = deserialize_stats(blob[off:off + n_b]) if n_b else None
        off += n_b
        (n_d,) = struct.unpack_from("<I", blob, off)
        off += 4
        det = deserialize_detector(blob[off:off + n_d]) if n_d else None
        off += n_d
        users[uid] = {"domain_id": did, "q": q, "params": params,
                      "stats": stats, "detector": det}
    return {"round": round_idx, "global_params": global_params, "users": users}
