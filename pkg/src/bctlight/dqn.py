"""Q-network with an adaptive-pressure encoder, replay, and the reward predictor.

Networks are small numpy MLPs with hand-written backprop so that training
is deterministic and every gradient can be checked against finite
differences. Parameters live in flat ``dict[str, ndarray]`` containers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .netmodel import N_PHASES
from .pressure import AttentionParams, adaptive_pressures, attention_backward, attention_forward
from .simcore import RawObservation

COUNT_SCALE = 10.0
OBS_DIM = 36 + 36 + N_PHASES + 12 + 4
PRED_DIM = 48 + N_PHASES + N_PHASES


class NonFiniteActivation(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    queue: float = 0.25
    throughput: float = 0.1
    switch: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.8
    lr: float = 1e-3
    tau: float = 0.01
    eps_floor: float = 0.2
    eps_power: float = 0.45
    batch_size: int = 32
    buffer_capacity: int = 20000
    hidden: tuple[int, int] = (64, 64)
    pred_hidden: tuple[int, int] = (64, 32)
    pred_lr: float = 1e-3
    grad_clip: float = 10.0
    head: int = 4
    d_k: int = 8
    reward: RewardWeights = field(default_factory=RewardWeights)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 <= self.eps_floor <= 1:
            raise ValueError("eps_floor must lie in [0, 1]")


def epsilon(episode: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Power-law exploration decay with a floor; episodes count from 1."""
    return max(cfg.eps_floor, float(episode) ** (-cfg.eps_power))


def phase_one_hot(phase: int) -> np.ndarray:
    v = np.zeros(N_PHASES)
    v[phase - 1] = 1.0
    return v


def encode_observation(raw: RawObservation) -> np.ndarray:
    """Flat (OBS_DIM,) vector: upstream matrix, downstream matrix, phase, running, neighbours."""
    return np.concatenate([
        raw.upstream.ravel(), raw.downstream.ravel(), phase_one_hot(raw.phase),
        raw.upstream[..., 1].ravel(), raw.neighbor_queues,
    ])


def encode_prediction_input(raw: RawObservation, q_cur: np.ndarray) -> np.ndarray:
    return np.concatenate([
        raw.up_waiting / COUNT_SCALE, raw.up_running / COUNT_SCALE,
        raw.down_waiting / COUNT_SCALE, raw.down_running / COUNT_SCALE,
        phase_one_hot(raw.phase), np.asarray(q_cur, dtype=float) / COUNT_SCALE,
    ])


def _split_obs(x: np.ndarray):
    b = x.shape[0]
    up = x[:, 0:36].reshape(b, 4, 3, 3)
    down = x[:, 36:72].reshape(b, 4, 3, 3)
    phase = x[:, 72:80]
    running = x[:, 80:92]
    neigh = x[:, 92:96]
    return up, down, phase, running, neigh


# ---------------------------------------------------------------- MLP


def _init_mlp(rng: np.random.Generator, sizes, prefix: str) -> dict[str, np.ndarray]:
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}W{i}"] = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))
        params[f"{prefix}b{i}"] = np.zeros(n_out)
    return params


def _mlp_forward(params, prefix: str, n_layers: int, x: np.ndarray):
    acts = [x]
    h = x
    for i in range(n_layers):
        z = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(h)
    return h, acts


def _mlp_backward(params, prefix: str, n_layers: int, acts, dout: np.ndarray):
    grads = {}
    d = dout
    for i in reversed(range(n_layers)):
        h_in = acts[i]
        grads[f"{prefix}W{i}"] = h_in.T @ d
        grads[f"{prefix}b{i}"] = d.sum(axis=0)
        d = d @ params[f"{prefix}W{i}"].T
        if i > 0:
            d = d * (acts[i] > 0)
    return grads, d


class _Net:
    params: dict[str, np.ndarray]

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k, v in self.params.items():
            n = v.size
            self.params[k] = vec[i:i + n].reshape(v.shape).copy()
            i += n

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.params.items()}


class QNet(_Net):
    """Maps encoded observations to 8 phase values.

    ``mode="ap"`` feeds attention-based adaptive pressure, phase, upstream
    running counts and neighbour queues to the MLP; ``mode="plain"`` feeds
    raw upstream queues and phase only.
    """

    def __init__(self, rng: np.random.Generator, mode: str = "ap", hidden=(64, 64), head: int = 4, d_k: int = 8):
        if mode not in ("ap", "plain"):
            raise ValueError(f"unknown QNet mode {mode!r}")
        self.mode = mode
        n_in = 36 if mode == "ap" else 20
        self.sizes = (n_in, *hidden, N_PHASES)
        self.params = {}
        if mode == "ap":
            att = AttentionParams.init(rng, head=head, d_k=d_k)
            self.params.update({f"att.{k}": v for k, v in att.as_dict().items()})
        self.params.update(_init_mlp(rng, self.sizes, "mlp."))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def attention(self) -> AttentionParams:
        p = self.params
        return AttentionParams(p["att.wq"], p["att.wk"], p["att.wm"])

    def forward(self, x: np.ndarray):
        x = np.atleast_2d(x)
        up, down, phase, running, neigh = _split_obs(x)
        b = x.shape[0]
        if self.mode == "ap":
            weights, acache = attention_forward(self.attention(), up, down, COUNT_SCALE)
            ap = adaptive_pressures(up, down, weights)
            feats = np.concatenate([ap.reshape(b, 12) / COUNT_SCALE, phase,
                                    running / COUNT_SCALE, neigh / COUNT_SCALE], axis=1)
        else:
            acache = weights = None
            feats = np.concatenate([up[..., 0].reshape(b, 12) / COUNT_SCALE, phase], axis=1)
        q, acts = _mlp_forward(self.params, "mlp.", self.n_layers, feats)
        if not np.all(np.isfinite(q)):
            raise NonFiniteActivation("Q-network produced non-finite values")
        return q, (down, weights, acache, acts)

    def backward(self, cache, dq: np.ndarray) -> dict[str, np.ndarray]:
        down, weights, acache, acts = cache
        grads, dfeats = _mlp_backward(self.params, "mlp.", self.n_layers, acts, dq)
        if self.mode == "ap":
            b = dq.shape[0]
            dap = dfeats[:, :12].reshape(b, 4, 3) / COUNT_SCALE
            dweights = -dap[..., None] * down[..., 0][:, :, None, :]
            for k, v in attention_backward(self.attention(), acache, dweights).items():
                grads[f"att.{k}"] = v
        return {k: grads[k] for k in self.params}


class PredictionNet(_Net):
    """Three dense layers from raw lane counts, phase and current Q-values to next reward."""

    def __init__(self, rng: np.random.Generator, hidden=(64, 32)):
        self.sizes = (PRED_DIM, *hidden, 1)
        self.params = _init_mlp(rng, self.sizes, "")

    def forward(self, x: np.ndarray):
        out, acts = _mlp_forward(self.params, "", len(self.sizes) - 1, np.atleast_2d(x))
        if not np.all(np.isfinite(out)):
            raise NonFiniteActivation("prediction network produced non-finite values")
        return out[:, 0], acts

    def backward(self, acts, dout: np.ndarray) -> dict[str, np.ndarray]:
        grads, _ = _mlp_backward(self.params, "", len(self.sizes) - 1, acts, dout[:, None])
        return grads


def q_values(net: QNet, obs: np.ndarray) -> np.ndarray:
    return net.forward(obs)[0][0]


def predict_reward(pnet: PredictionNet, pred_input: np.ndarray) -> float:
    return float(pnet.forward(pred_input)[0][0])


def select_action(qvals, eps: float, rng: np.random.Generator, current_phase: int | None = None):
    """Epsilon-greedy phase in 1..8 (lowest index wins ties) and whether it switches phase."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    qvals = np.asarray(qvals)
    if eps > 0 and rng.random() < eps:
        phase = int(rng.integers(len(qvals))) + 1
    else:
        phase = int(np.argmax(qvals)) + 1
    return phase, (current_phase is not None and phase != current_phase)


def reward(queue: float, throughput: float, switched: bool, weights: RewardWeights = RewardWeights()) -> float:
    return -weights.queue * queue + weights.throughput * throughput - weights.switch * float(switched)


# ---------------------------------------------------------------- training


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not np.isfinite(norm):
        raise NonFiniteGradient("gradient is not finite")
    if max_norm and norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def td_loss_and_grads(net: QNet, target: QNet, batch, gamma: float):
    obs, actions, rewards, next_obs = batch
    q, cache = net.forward(obs)
    q_next, _ = target.forward(next_obs)
    rows = np.arange(len(actions))
    td = rewards + gamma * q_next.max(axis=1) - q[rows, actions]
    dq = np.zeros_like(q)
    dq[rows, actions] = -td / len(actions)  # d/dq of 0.5 * mean(td^2)
    return float(np.mean(td ** 2)), net.backward(cache, dq)


def td_update(net: QNet, target: QNet, batch, cfg: TrainConfig) -> float:
    """One SGD step on the TD error against the target network; returns mean squared TD error."""
    if len(batch[1]) == 0:
        raise ValueError("empty batch")
    loss, grads = td_loss_and_grads(net, target, batch, cfg.gamma)
    grads = _clip(grads, cfg.grad_clip)
    for k, g in grads.items():
        net.params[k] = net.params[k] - cfg.lr * g
    return loss


def soft_update(target: _Net, online: _Net, tau: float) -> None:
    if target.shapes() != online.shapes():
        raise ShapeMismatch("target and online networks differ in shape")
    for k, v in online.params.items():
        target.params[k] = tau * v + (1.0 - tau) * target.params[k]


def prediction_update(pnet: PredictionNet, inputs: np.ndarray, targets: np.ndarray, lr: float,
                      grad_clip: float = 10.0) -> float:
    pred, acts = pnet.forward(inputs)
    err = pred - targets
    grads = _clip(pnet.backward(acts, err / len(err)), grad_clip)
    for k, g in grads.items():
        pnet.params[k] = pnet.params[k] - lr * g
    return float(np.mean(err ** 2))


# ---------------------------------------------------------------- replay


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions plus per-intersection histories.

    ``rewards[i]`` is the reward history of intersection ``i`` and
    ``qhist[i]`` the matching (T, 8) history of current Q-values; both
    are append-only and therefore time-ordered.
    """

    def __init__(self, capacity: int, n_intersections: int = 1):
        self.capacity = capacity
        self.obs = np.zeros((capacity, OBS_DIM))
        self.next_obs = np.zeros((capacity, OBS_DIM))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards_t = np.zeros(capacity)
        self.pred_in = np.zeros((capacity, PRED_DIM))
        self.size = 0
        self.head = 0
        self.rewards: list[list[float]] = [[] for _ in range(n_intersections)]
        self.qhist: list[list[np.ndarray]] = [[] for _ in range(n_intersections)]

    def __len__(self) -> int:
        return self.size

    def push(self, obs, action: int, r: float, next_obs, pred_in=None) -> None:
        i = self.head
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards_t[i] = r
        self.next_obs[i] = next_obs
        if pred_in is not None:
            self.pred_in[i] = pred_in
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _slots(self) -> np.ndarray:
        # oldest first
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.head + np.arange(self.capacity)) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(self.size, size=batch_size)
        return self.obs[idx], self.actions[idx], self.rewards_t[idx], self.next_obs[idx]

    def sample_prediction(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(self.size, size=batch_size)
        return self.pred_in[idx], self.rewards_t[idx]

    def ordered_actions(self) -> np.ndarray:
        return self.actions[self._slots()]

    def record(self, intersection: int, r: float, q_cur) -> None:
        self.rewards[intersection].append(float(r))
        self.qhist[intersection].append(np.asarray(q_cur, dtype=float).copy())

    def q_history(self, intersection: int, window: int | None = None) -> np.ndarray:
        h = self.qhist[intersection][-window:] if window else self.qhist[intersection]
        return np.array(h).reshape(-1, N_PHASES)


# ---------------------------------------------------------------- checkpoints


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, nets: dict[str, _Net], buffer: ReplayBuffer | None = None, meta: dict | None = None) -> None:
    """Write every parameter tensor, the CT histories and a JSON metadata record to one .npz."""
    arrays = {}
    for name, net in nets.items():
        for k, v in net.params.items():
            arrays[f"{name}/{k}"] = v
    header = {"meta": meta or {}, "nets": {}}
    for name, net in nets.items():
        header["nets"][name] = {"class": type(net).__name__, "sizes": list(net.sizes),
                                "mode": getattr(net, "mode", None), "keys": list(net.params)}
    if buffer is not None:
        header["n_intersections"] = len(buffer.rewards)
        for i, (r, q) in enumerate(zip(buffer.rewards, buffer.qhist)):
            arrays[f"hist/R/{i}"] = np.asarray(r, dtype=float)
            arrays[f"hist/Q/{i}"] = np.array(q, dtype=float).reshape(-1, N_PHASES)
    arrays["header"] = np.array(json.dumps(header))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (nets, histories, meta)."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        nets = {}
        for name, spec in header["nets"].items():
            cls = {"QNet": QNet, "PredictionNet": PredictionNet}[spec["class"]]
            net = object.__new__(cls)
            net.sizes = tuple(spec["sizes"])
            if spec["mode"] is not None:
                net.mode = spec["mode"]
            net.params = {k: data[f"{name}/{k}"].copy() for k in spec["keys"]}
            nets[name] = net
        hist = None
        if "n_intersections" in header:
            n = header["n_intersections"]
            hist = ([data[f"hist/R/{i}"].tolist() for i in range(n)],
                    [list(data[f"hist/Q/{i}"]) for i in range(n)])
    return nets, hist, header["meta"]
