"""Networked multi-agent actor-critic in plain numpy.

Each agent owns a deterministic actor on its local observation and a critic
on the global state and joint action.  Training is centralized and replay
driven; execution only ever sees local observations.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "nmac-checkpoint/1"
HIDDEN = 64


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during an update."""


@dataclass
class MlpParams:
    """Fully connected net: ReLU hidden layers, sigmoid or identity output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "identity"

    @classmethod
    def init(cls, sizes: Sequence[int], output: str, rng: np.random.Generator) -> MlpParams:
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, fan_out))
        return cls(ws, bs, output)

    @classmethod
    def zeros_like(cls, other: MlpParams) -> MlpParams:
        return cls([np.zeros_like(w) for w in other.weights],
                   [np.zeros_like(b) for b in other.biases], other.output)

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.output)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        k = 0
        for a in self.arrays():
            a[...] = vec[k:k + a.size].reshape(a.shape)
            k += a.size

    def check(self) -> None:
        for w, b, w2 in zip(self.weights, self.biases, self.weights[1:] + [None]):
            if b.shape != (w.shape[1],) or (w2 is not None and w2.shape[0] != w.shape[1]):
                raise ValueError("inconsistent layer shapes")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ValueError("non-finite parameters")

    def to_json(self) -> dict:
        return {"output": self.output,
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_json(cls, d: dict) -> MlpParams:
        p = cls([np.array(w, dtype=float) for w in d["weights"]],
                [np.array(b, dtype=float) for b in d["biases"]], d["output"])
        p.check()
        return p


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Forward pass on a (B, d) batch; returns output and the activation cache."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {params.in_dim}")
    acts = [x]
    h = x
    n = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if k < n - 1:
            h = np.maximum(z, 0.0)
        elif params.output == "sigmoid":
            h = _sigmoid(z)
        else:
            h = z
        acts.append(h)
    return h, acts


def mlp_backward(params: MlpParams, acts: list[np.ndarray], grad_out: np.ndarray):
    """Backprop ``grad_out`` (dLoss/dOutput); returns (param grads, dLoss/dInput)."""
    grads = MlpParams.zeros_like(params)
    n = len(params.weights)
    out = acts[-1]
    if params.output == "sigmoid":
        g = grad_out * out * (1.0 - out)
    else:
        g = grad_out
    for k in range(n - 1, -1, -1):
        grads.weights[k] = acts[k].T @ g
        grads.biases[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
        if k > 0:
            g = g * (acts[k] > 0)
    return grads, g


def actor_forward(params: MlpParams, obs: np.ndarray) -> np.ndarray:
    """Deterministic action in (0, 1)^A for one observation or a batch."""
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    out, _ = mlp_forward(params, obs[None] if single else obs)
    return out[0] if single else out


def critic_forward(params: MlpParams, global_state: np.ndarray, joint_action: np.ndarray):
    s = np.asarray(global_state, dtype=float)
    a = np.asarray(joint_action, dtype=float)
    single = s.ndim == 1
    x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)
    q, _ = mlp_forward(params, x)
    return float(q[0, 0]) if single else q[:, 0]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    gamma: float = 0.95
    batch_size: int = 64
    replay_capacity: int = 50_000
    tau: float = 0.01  # soft target update rate
    exploration_episodes: int = 100
    noise_scale: float = 0.2
    noise_min: float = 0.02
    update_every: int = 1  # frames between update rounds
    updates_per_round: int = 1
    reward_scale: float = 0.1
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


@dataclass
class Transition:
    global_state: np.ndarray
    joint_action: np.ndarray
    rewards: np.ndarray
    next_global_state: np.ndarray
    done: bool = False


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    @classmethod
    def from_transitions(cls, ts: Sequence[Transition]) -> Batch:
        return cls(
            np.stack([t.global_state for t in ts]).astype(float),
            np.stack([t.joint_action for t in ts]).astype(float),
            np.stack([t.rewards for t in ts]).astype(float),
            np.stack([t.next_global_state for t in ts]).astype(float),
            np.array([float(t.done) for t in ts]),
        )

    def __len__(self):
        return len(self.s)


class ReplayBuffer:
    """Ring buffer of transitions; storage grows on demand up to ``capacity``."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, n_agents: int):
        self.capacity = capacity
        self._dims = (state_dim, action_dim, n_agents)
        self._alloc(min(capacity, 1024))
        self.size = 0
        self._pos = 0

    def _alloc(self, n: int) -> None:
        sd, ad, na = self._dims
        old = getattr(self, "s", None)
        fields = {"s": sd, "a": ad, "r": na, "s2": sd}
        for name, d in fields.items():
            arr = np.zeros((n, d))
            if old is not None:
                prev = getattr(self, name)
                arr[: len(prev)] = prev
            setattr(self, name, arr)
        done = np.zeros(n)
        if old is not None:
            done[: len(self.done)] = self.done
        self.done = done

    def add(self, t: Transition) -> None:
        k = self._pos
        if k >= len(self.s):
            self._alloc(min(self.capacity, 2 * len(self.s)))
        self.s[k], self.a[k], self.r[k], self.s2[k] = t.global_state, t.joint_action, t.rewards, t.next_global_state
        self.done[k] = float(t.done)
        self._pos = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self):
        return self.size

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx = rng.integers(0, self.size, size=n)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])


@dataclass
class Agent:
    actor: MlpParams
    critic: MlpParams
    target_actor: MlpParams
    target_critic: MlpParams


def _clip_step(params: MlpParams, grads: MlpParams, lr: float, clip: float, sign: float) -> float:
    gnorm = float(np.sqrt(sum(np.sum(g * g) for g in grads.arrays())))
    if not np.isfinite(gnorm):
        raise TrainingError("non-finite gradient")
    scale = min(1.0, clip / gnorm) if clip and gnorm > 0 else 1.0
    for p, g in zip(params.arrays(), grads.arrays()):
        p += sign * lr * scale * g
    return gnorm


def soft_update(target: MlpParams, online: MlpParams, rate: float) -> None:
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    for t, o in zip(target.arrays(), online.arrays()):
        t *= 1.0 - rate
        t += rate * o


def policy_gradient_step(actor: MlpParams, obs: np.ndarray, dq_da: np.ndarray, lr: float,
                         clip: float = 0.0) -> float:
    """One ascent step of the deterministic policy gradient given dQ/da per sample."""
    obs = np.atleast_2d(obs)
    _, acts = mlp_forward(actor, obs)
    grads, _ = mlp_backward(actor, acts, np.atleast_2d(dq_da) / len(obs))
    return _clip_step(actor, grads, lr, clip, +1.0)


class Nmac:
    """One actor/critic pair (plus targets) per agent."""

    def __init__(self, obs_dims: Sequence[int], act_dims: Sequence[int],
                 cfg: TrainConfig | None = None, seed: int | None = None):
        self.cfg = cfg or TrainConfig()
        self.obs_dims = [int(d) for d in obs_dims]
        self.act_dims = [int(d) for d in act_dims]
        self.n_agents = len(self.obs_dims)
        self.rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        self._obs_off = np.concatenate([[0], np.cumsum(self.obs_dims)]).astype(int)
        self._act_off = np.concatenate([[0], np.cumsum(self.act_dims)]).astype(int)
        self.state_dim = int(self._obs_off[-1])
        self.action_dim = int(self._act_off[-1])
        self.agents: list[Agent] = []
        for i in range(self.n_agents):
            actor = MlpParams.init([self.obs_dims[i], HIDDEN, HIDDEN, self.act_dims[i]], "sigmoid", self.rng)
            critic = MlpParams.init([self.state_dim + self.action_dim, HIDDEN, HIDDEN, 1], "identity", self.rng)
            self.agents.append(Agent(actor, critic, actor.copy(), critic.copy()))
        self.buffer = ReplayBuffer(self.cfg.replay_capacity, self.state_dim, self.action_dim, self.n_agents)

    def obs_slice(self, i: int) -> slice:
        return slice(self._obs_off[i], self._obs_off[i + 1])

    def act_slice(self, i: int) -> slice:
        return slice(self._act_off[i], self._act_off[i + 1])

    # execution: local observation only
    def act(self, i: int, local_obs: np.ndarray) -> np.ndarray:
        local_obs = np.asarray(local_obs, dtype=float)
        if local_obs.shape != (self.obs_dims[i],):
            raise ValueError(f"agent {i} expects a local observation of length {self.obs_dims[i]}")
        return actor_forward(self.agents[i].actor, local_obs)

    def act_all(self, observations: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [self.act(i, o) for i, o in enumerate(observations)]

    def _target_joint_action(self, s2: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [actor_forward(ag.target_actor, s2[:, self.obs_slice(i)]) for i, ag in enumerate(self.agents)],
            axis=1,
        )

    def critic_targets(self, i: int, batch: Batch) -> np.ndarray:
        a2 = self._target_joint_action(batch.s2)
        q2 = critic_forward(self.agents[i].target_critic, batch.s2, a2)
        return self.cfg.reward_scale * batch.r[:, i] + self.cfg.gamma * (1.0 - batch.done) * q2

    def critic_loss_grad(self, i: int, batch: Batch, targets: np.ndarray | None = None,
                         params: MlpParams | None = None):
        """Mean squared Bellman error and its gradient wrt the critic parameters."""
        params = params or self.agents[i].critic
        y = self.critic_targets(i, batch) if targets is None else targets
        q, acts = mlp_forward(params, np.concatenate([batch.s, batch.a], axis=1))
        diff = q[:, 0] - y
        loss = float(np.mean(diff**2))
        grads, _ = mlp_backward(params, acts, (2.0 * diff / len(diff))[:, None])
        return loss, grads

    def critic_update(self, i: int, batch: Batch) -> float:
        if len(batch) == 0:
            raise ValueError("empty batch")
        loss, grads = self.critic_loss_grad(i, batch)
        if not np.isfinite(loss):
            raise TrainingError(f"agent {i}: non-finite critic loss")
        _clip_step(self.agents[i].critic, grads, self.cfg.learning_rate, self.cfg.grad_clip, -1.0)
        return loss

    def actor_objective_grad(self, i: int, batch: Batch, params: MlpParams | None = None):
        """Surrogate J = mean Q_i(s, a with agent i's slot replaced by its actor) and dJ/dtheta."""
        ag = self.agents[i]
        params = params or ag.actor
        obs = batch.s[:, self.obs_slice(i)]
        a_i, a_acts = mlp_forward(params, obs)
        joint = batch.a.copy()
        joint[:, self.act_slice(i)] = a_i
        q, c_acts = mlp_forward(ag.critic, np.concatenate([batch.s, joint], axis=1))
        B = len(obs)
        _, dx = mlp_backward(ag.critic, c_acts, np.full((B, 1), 1.0 / B))
        da = dx[:, self.state_dim:][:, self.act_slice(i)]
        grads, _ = mlp_backward(params, a_acts, da)
        return float(np.mean(q)), grads

    def actor_update(self, i: int, batch: Batch) -> float:
        _, grads = self.actor_objective_grad(i, batch)
        return _clip_step(self.agents[i].actor, grads, self.cfg.learning_rate, self.cfg.grad_clip, +1.0)

    def soft_update_targets(self, i: int, rate: float | None = None) -> None:
        rate = self.cfg.tau if rate is None else rate
        ag = self.agents[i]
        soft_update(ag.target_actor, ag.actor, rate)
        soft_update(ag.target_critic, ag.critic, rate)

    def update_round(self) -> dict:
        stats = {"critic_loss": [], "actor_grad": []}
        for _ in range(self.cfg.updates_per_round):
            batch = self.buffer.sample(self.cfg.batch_size, self.rng)
            for i in range(self.n_agents):
                stats["critic_loss"].append(self.critic_update(i, batch))
                stats["actor_grad"].append(self.actor_update(i, batch))
            for i in range(self.n_agents):
                self.soft_update_targets(i)
        return {k: float(np.mean(v)) for k, v in stats.items()}

    def save(self, path: str | Path) -> None:
        doc = {
            "version": CHECKPOINT_VERSION,
            "obs_dims": self.obs_dims,
            "act_dims": self.act_dims,
            "config": asdict(self.cfg),
            "rng_state": self.rng.bit_generator.state,
            "agents": [
                {k: getattr(ag, k).to_json() for k in ("actor", "critic", "target_actor", "target_critic")}
                for ag in self.agents
            ],
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> Nmac:
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        self = cls.__new__(cls)
        self.cfg = TrainConfig(**doc["config"])
        self.obs_dims, self.act_dims = doc["obs_dims"], doc["act_dims"]
        self.n_agents = len(self.obs_dims)
        self._obs_off = np.concatenate([[0], np.cumsum(self.obs_dims)]).astype(int)
        self._act_off = np.concatenate([[0], np.cumsum(self.act_dims)]).astype(int)
        self.state_dim, self.action_dim = int(self._obs_off[-1]), int(self._act_off[-1])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = doc["rng_state"]
        self.agents = [
            Agent(*(MlpParams.from_json(a[k]) for k in ("actor", "critic", "target_actor", "target_critic")))
            for a in doc["agents"]
        ]
        self.buffer = ReplayBuffer(self.cfg.replay_capacity, self.state_dim, self.action_dim, self.n_agents)
        return self


class Env(Protocol):
    obs_dims: list[int]
    act_dims: list[int]

    def reset(self, seed: int) -> list[np.ndarray]: ...

    def step(self, actions: Sequence[np.ndarray]) -> tuple[list[np.ndarray], np.ndarray]: ...


@dataclass
class TrainLog:
    episode_rewards: list[float] = field(default_factory=list)
    critic_loss: list[float] = field(default_factory=list)
    actor_grad: list[float] = field(default_factory=list)
    frames: int = 0
    updates: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def exploration_sigma(cfg: TrainConfig, episode: int, episodes: int) -> float:
    """Noise std after the random stage: linear decay from noise_scale to noise_min."""
    span = max(episodes - cfg.exploration_episodes, 1)
    frac = min(max((episode - cfg.exploration_episodes) / span, 0.0), 1.0)
    return cfg.noise_scale + (cfg.noise_min - cfg.noise_scale) * frac


def train(
    env: Env,
    cfg: TrainConfig,
    episodes: int,
    frames_per_episode: int,
    learner: Nmac | None = None,
    checkpoint: str | Path | None = None,
    episode_seed=lambda e: e,
) -> tuple[Nmac, TrainLog]:
    """Offline centralized training loop.

    The first ``cfg.exploration_episodes`` episodes act uniformly at random;
    after that actions are actor outputs plus decaying Gaussian noise,
    clipped to [0, 1].  An update round runs every ``cfg.update_every``
    frames once the buffer holds a full batch.
    """
    learner = learner or Nmac(env.obs_dims, env.act_dims, cfg)
    rng = learner.rng
    tlog = TrainLog()
    frame = 0
    for ep in range(episodes):
        obs = env.reset(episode_seed(ep))
        total = 0.0
        sigma = exploration_sigma(cfg, ep, episodes)
        for _ in range(frames_per_episode):
            if ep < cfg.exploration_episodes:
                actions = [rng.random(d) for d in learner.act_dims]
            else:
                actions = [
                    np.clip(a + rng.normal(0.0, sigma, a.shape), 0.0, 1.0)
                    for a in learner.act_all(obs)
                ]
            next_obs, rewards = env.step(actions)
            learner.buffer.add(Transition(np.concatenate(obs), np.concatenate(actions),
                                          np.asarray(rewards, dtype=float), np.concatenate(next_obs)))
            total += float(np.mean(rewards))
            obs = next_obs
            frame += 1
            if frame % cfg.update_every == 0 and len(learner.buffer) >= cfg.batch_size:
                stats = learner.update_round()
                tlog.critic_loss.append(stats["critic_loss"])
                tlog.actor_grad.append(stats["actor_grad"])
                tlog.updates += 1
        if checkpoint is not None and tlog.updates:
            learner.save(checkpoint)
        tlog.episode_rewards.append(total / max(frames_per_episode, 1))
        log.debug("episode %d mean reward %.4f", ep, tlog.episode_rewards[-1])
    tlog.frames = frame
    return learner, tlog


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def _random_batch(learner: Nmac, n: int, rng: np.random.Generator) -> Batch:
    return Batch(
        rng.normal(size=(n, learner.state_dim)),
        rng.random((n, learner.action_dim)),
        rng.normal(size=(n, learner.n_agents)),
        rng.normal(size=(n, learner.state_dim)),
        np.zeros(n),
    )


def _fd_grad(f, params: MlpParams, coords: np.ndarray, eps: float) -> np.ndarray:
    theta = params.flat()
    out = np.zeros(len(coords))
    q = params.copy()
    for n, j in enumerate(coords):
        v = theta.copy()
        v[j] += eps
        q.set_flat(v)
        hi = f(q)
        v[j] -= 2 * eps
        q.set_flat(v)
        out[n] = (hi - f(q)) / (2 * eps)
    return out


def gradient_check(points: int = 20, seed: int = 0, eps: float = 1e-6, coords: int = 300,
                   obs_dims: Sequence[int] = (5, 4), act_dims: Sequence[int] = (2, 3),
                   batch_size: int = 8) -> dict:
    """Compare analytic critic-loss and actor-surrogate gradients with central
    differences at ``points`` random (network, batch) draws, over up to
    ``coords`` randomly chosen parameters per network."""
    rng = np.random.default_rng(seed)
    crit, act = [], []
    for k in range(points):
        learner = Nmac(obs_dims, act_dims, TrainConfig(seed=seed * 1000 + k))
        batch = _random_batch(learner, batch_size, rng)
        i = k % learner.n_agents
        targets = learner.critic_targets(i, batch)

        p = learner.agents[i].critic
        _, g = learner.critic_loss_grad(i, batch, targets, p)
        idx = rng.choice(len(g.flat()), size=min(coords, len(g.flat())), replace=False)
        num = _fd_grad(lambda q: learner.critic_loss_grad(i, batch, targets, q)[0], p, idx, eps)
        crit.append(_rel_err(g.flat()[idx], num))

        p = learner.agents[i].actor
        _, g = learner.actor_objective_grad(i, batch, p)
        idx = rng.choice(len(g.flat()), size=min(coords, len(g.flat())), replace=False)
        num = _fd_grad(lambda q: learner.actor_objective_grad(i, batch, q)[0], p, idx, eps)
        act.append(_rel_err(g.flat()[idx], num))
    return {
        "points": points,
        "critic_max_rel_err": max(crit) if crit else 0.0,
        "actor_max_rel_err": max(act) if act else 0.0,
        "critic_rel_err": crit,
        "actor_rel_err": act,
    }


def single_transition_descent(steps: int = 50, seed: int = 0, obs_dims: Sequence[int] = (5, 4),
                              act_dims: Sequence[int] = (2, 3), learning_rate: float = 0.01) -> list[float]:
    """Critic losses while repeatedly fitting one fixed transition (targets held fixed)."""
    rng = np.random.default_rng(seed)
    learner = Nmac(obs_dims, act_dims, TrainConfig(seed=seed, learning_rate=learning_rate))
    batch = _random_batch(learner, 1, rng)
    return [learner.critic_update(0, batch) for _ in range(steps)]
