"""Toy sequential environment plus behavioral-cloning distillation.

A scripted shortest-path expert stands in for a learned controller. The
frozen policy network is first cloned from the expert over all states;
heads are then distilled from rollouts in which a uniformly chosen head
drives the environment while the stored training target is always the
expert's action distribution. Early exit at inference time trades return
against per-step compute through the usual confidence threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BackboneModel
from .bundle import ModelBundle
from .exceptions import ConfigError, TrainingError
from .heads import cascade_forward_all, make_heads
from .layers import ConvLayer, DenseLayer, Flatten, Relu
from .optim import make_optimizer, minibatches
from .policies import run_threshold_exit
from .rng import SplitMix64

# up, down, left, right as (dy, dx)
ACTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))
NUM_ACTIONS = 4


@dataclass
class GridWorld:
    """Deterministic navigation grid; stochasticity only via reset seeds."""

    width: int = 7
    height: int = 7
    step_limit: int = 30
    agent: tuple = (0, 0)
    goal: tuple = (0, 1)
    steps: int = 0
    done: bool = False

    def reset(self, episode_seed: int) -> np.ndarray:
        rng = SplitMix64(episode_seed)
        cells = self.width * self.height
        a = rng.randint(cells)
        g = rng.randint(cells)
        while g == a:
            g = rng.randint(cells)
        self.agent = divmod(a, self.width)
        self.goal = divmod(g, self.width)
        self.steps = 0
        self.done = False
        return self.observation()

    def observation(self) -> np.ndarray:
        obs = np.zeros((2, self.height, self.width))
        obs[0, self.agent[0], self.agent[1]] = 1.0
        obs[1, self.goal[0], self.goal[1]] = 1.0
        return obs

    def step(self, action: int):
        if self.done:
            raise ConfigError("step() on a finished episode")
        dy, dx = ACTIONS[action]
        y = min(max(self.agent[0] + dy, 0), self.height - 1)
        x = min(max(self.agent[1] + dx, 0), self.width - 1)
        self.agent = (y, x)
        self.steps += 1
        reward = -0.01
        if self.agent == self.goal:
            reward += 1.0
            self.done = True
        elif self.steps >= self.step_limit:
            self.done = True
        return self.observation(), reward, self.done


def expert_distribution(agent: tuple, goal: tuple, epsilon: float) -> np.ndarray:
    """Shortest-path action distribution with epsilon smoothing.

    Mass 1 - epsilon is split evenly over the moves that reduce Manhattan
    distance; epsilon spreads uniformly over all four actions.
    """
    dy = goal[0] - agent[0]
    dx = goal[1] - agent[1]
    greedy = []
    if dy < 0:
        greedy.append(0)
    elif dy > 0:
        greedy.append(1)
    if dx < 0:
        greedy.append(2)
    elif dx > 0:
        greedy.append(3)
    dist = np.full(NUM_ACTIONS, epsilon / NUM_ACTIONS)
    if greedy:
        for a in greedy:
            dist[a] += (1.0 - epsilon) / len(greedy)
    else:
        dist += (1.0 - epsilon) / NUM_ACTIONS
    return dist


def expert_distribution_from_obs(obs: np.ndarray, epsilon: float) -> np.ndarray:
    agent = tuple(int(v) for v in np.argwhere(obs[0] == 1.0)[0])
    goal = tuple(int(v) for v in np.argwhere(obs[1] == 1.0)[0])
    return expert_distribution(agent, goal, epsilon)


def make_grid_backbone(height: int, width: int, channels: int, seed: int) -> BackboneModel:
    """Two conv blocks and a dense action readout; taps after each block."""
    rng = SplitMix64(seed)
    layers = [ConvLayer.create(2, channels, 3, rng, padding="same"), Relu(),
              ConvLayer.create(channels, 2 * channels, 3, rng, padding="same"), Relu(),
              Flatten(),
              DenseLayer.create(2 * channels * height * width, NUM_ACTIONS, rng)]
    return BackboneModel(layers=layers, tap_indices=[1, 3],
                         input_shape=(2, height, width), num_classes=NUM_ACTIONS)


def _soft_cross_entropy(log_p: Tensor, targets: np.ndarray) -> Tensor:
    return ad.neg((Tensor(targets) * log_p).sum(axis=-1)).mean()


def _kl_value(log_p: np.ndarray, targets: np.ndarray) -> float:
    """Forward KL(expert || head), with 0 * log 0 = 0."""
    safe = np.where(targets > 0, targets * np.log(np.where(targets > 0, targets, 1.0)), 0.0)
    return float((safe.sum(axis=-1) - (targets * log_p).sum(axis=-1)).mean())


def enumerate_states(height: int, width: int, epsilon: float):
    """Every (agent, goal) pair with targets; the cloning set for the policy."""
    obs_list, target_list = [], []
    for ay in range(height):
        for ax in range(width):
            for gy in range(height):
                for gx in range(width):
                    if (ay, ax) == (gy, gx):
                        continue
                    obs = np.zeros((2, height, width))
                    obs[0, ay, ax] = 1.0
                    obs[1, gy, gx] = 1.0
                    obs_list.append(obs)
                    target_list.append(expert_distribution((ay, ax), (gy, gx), epsilon))
    return np.stack(obs_list), np.stack(target_list)


def pretrain_grid_policy(backbone: BackboneModel, height: int, width: int,
                         epsilon: float, *, epochs: int, lr: float,
                         batch_size: int = 128, seed: int = 0) -> BackboneModel:
    """Clone the expert into the base network over all states, then freeze."""
    inputs, targets = enumerate_states(height, width, epsilon)
    rng = SplitMix64(seed)
    opt = make_optimizer("adam", backbone.params(), lr)
    n = inputs.shape[0]
    for epoch in range(epochs):
        for batch in minibatches(n, batch_size, rng):
            log_p = ad.log_softmax(backbone.forward(Tensor(inputs[batch])))
            loss = _soft_cross_entropy(log_p, targets[batch])
            if not np.isfinite(loss.data):
                raise TrainingError(f"policy cloning diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    backbone.freeze()
    return backbone


@dataclass
class ReplayBuffer:
    observations: list = field(default_factory=list)
    expert_dists: list = field(default_factory=list)

    def append(self, obs: np.ndarray, dist: np.ndarray):
        self.observations.append(obs)
        self.expert_dists.append(dist)

    def __len__(self):
        return len(self.observations)

    def arrays(self):
        return np.stack(self.observations), np.stack(self.expert_dists)


def _head_probs_single(backbone, heads, obs: np.ndarray) -> list:
    taps = backbone.forward_with_taps(Tensor(obs[None]))
    outs = cascade_forward_all(heads, taps)
    return [p.data[0] for p in outs.probs], taps.final.data[0]


def rollout_uniform_ic(env: GridWorld, backbone: BackboneModel, heads: list,
                       steps: int, epsilon: float, rng: SplitMix64,
                       buffer: ReplayBuffer | None = None) -> ReplayBuffer:
    """Collect (observation, expert distribution) pairs.

    Each step a uniformly chosen head's argmax action drives the
    environment; the stored target is always the expert's distribution
    for the visited state. Returns the (possibly shorter) buffer if the
    environment cannot produce more steps.
    """
    if buffer is None:
        buffer = ReplayBuffer()
    if env.step_limit < 1:
        return buffer
    obs = env.reset(rng.next_u64())
    for _ in range(steps):
        probs, _final = _head_probs_single(backbone, heads, obs)
        chosen = rng.randint(len(heads))
        action = int(probs[chosen].argmax())
        buffer.append(obs, expert_distribution(env.agent, env.goal, epsilon))
        obs, _reward, done = env.step(action)
        if done:
            obs = env.reset(rng.next_u64())
    return buffer


def distill_heads(buffer: ReplayBuffer, backbone: BackboneModel, heads: list, *,
                  epochs: int, batch_size: int, lr: float, rng: SplitMix64,
                  stop_gradient: bool = True) -> list:
    """Minimize the summed forward KL from the expert to every head.

    Returns the mean buffer KL per head after each epoch (entry 0 is the
    pre-training value), so callers can check it decreases.
    """
    if len(buffer) == 0:
        raise TrainingError("replay buffer is empty")
    inputs, targets = buffer.arrays()
    params = [p for h in heads for p in h.params()]
    opt = make_optimizer("adam", params, lr)
    n = inputs.shape[0]

    def buffer_kl() -> list:
        taps = backbone.forward_with_taps(Tensor(inputs))
        outs = cascade_forward_all(heads, taps)
        kls = []
        for lg in outs.logits:
            z = lg.data
            zmax = z.max(axis=-1, keepdims=True)
            log_p = z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
            kls.append(_kl_value(log_p, targets))
        return kls

    history = [buffer_kl()]
    for epoch in range(epochs):
        for batch in minibatches(n, batch_size, rng):
            taps = backbone.forward_with_taps(Tensor(inputs[batch]))
            outs = cascade_forward_all(heads, taps, detach_cascade=stop_gradient)
            losses = [_soft_cross_entropy(ad.log_softmax(lg), targets[batch])
                      for lg in outs.logits]
            total = losses[0]
            for loss in losses[1:]:
                total = total + loss
            if not np.isfinite(total.data):
                raise TrainingError(f"distillation diverged at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
        history.append(buffer_kl())
    return history


@dataclass
class ReturnPoint:
    tau: float
    mean_return: float
    std_return: float
    mean_step_flops: float


def run_episode(env: GridWorld, bundle: ModelBundle, tau: float,
                episode_seed: int) -> tuple:
    """One greedy episode under the threshold policy; returns (return, flops/step)."""
    costs = bundle.cost_table(include_ensembles=False)
    obs = env.reset(episode_seed)
    total_reward = 0.0
    flops = []
    while not env.done:
        probs, final = _head_probs_single(bundle.backbone, bundle.heads, obs)
        decision = run_threshold_exit(probs, final, tau, costs)
        obs, reward, _done = env.step(decision.predicted)
        total_reward += reward
        flops.append(decision.cumulative_flops)
    return total_reward, float(np.mean(flops))


def eval_return_vs_cost(env: GridWorld, bundle: ModelBundle, tau_grid: list,
                        episodes: int, base_seed: int) -> list:
    """Mean/stddev return and mean per-step cost per threshold.

    Episode seeds depend only on (base_seed, episode index), so every tau
    sees the same start states; at tau > 1 the trajectory is exactly the
    base policy's.
    """
    if episodes < 2:
        raise ConfigError("need at least 2 episodes for a stddev")
    seed_stream = SplitMix64(base_seed)
    episode_seeds = [seed_stream.next_u64() for _ in range(episodes)]
    points = []
    for tau in tau_grid:
        returns, step_flops = [], []
        for s in episode_seeds:
            ret, fl = run_episode(env, bundle, tau, s)
            returns.append(ret)
            step_flops.append(fl)
        points.append(ReturnPoint(tau=float(tau),
                                  mean_return=float(np.mean(returns)),
                                  std_return=float(np.std(returns)),
                                  mean_step_flops=float(np.mean(step_flops))))
    return points


def base_policy_returns(env: GridWorld, backbone: BackboneModel, episodes: int,
                        base_seed: int) -> list:
    """Greedy full-network episodes under the same seed schedule."""
    seed_stream = SplitMix64(base_seed)
    episode_seeds = [seed_stream.next_u64() for _ in range(episodes)]
    returns = []
    for s in episode_seeds:
        obs = env.reset(s)
        total = 0.0
        while not env.done:
            logits = backbone.forward(Tensor(obs[None])).data[0]
            obs, reward, _done = env.step(int(logits.argmax()))
            total += reward
        returns.append(total)
    return returns


def write_return_csv(path: str, points: list):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("tau,mean_return,std_return,mean_step_flops\n")
        for p in points:
            f.write(f"{p.tau!r},{p.mean_return!r},{p.std_return!r},{p.mean_step_flops!r}\n")


@dataclass
class DistillResult:
    bundle: ModelBundle
    kl_history: list      # per-round list of per-epoch per-head KL
    return_points: list
    base_returns: list


def run_distill_pipeline(cfg: dict, seed: int) -> DistillResult:
    """Clone policy -> attach heads -> uniform-IC rollouts with periodic
    distillation -> threshold sweep of return vs per-step cost."""
    height, width = cfg["env.height"], cfg["env.width"]
    epsilon = cfg["env.epsilon"]
    seeds = SplitMix64(seed)
    backbone = make_grid_backbone(height, width, cfg["distill.channels"],
                                  seed=seeds.next_u64())
    pretrain_grid_policy(backbone, height, width, epsilon,
                         epochs=cfg["distill.pretrain_epochs"],
                         lr=cfg["distill.lr"], seed=seeds.next_u64())
    heads = make_heads(backbone, cascade=cfg["trainer.cascade"], seed=seeds.next_u64(),
                       pool_target=(cfg["trainer.pool_target"], cfg["trainer.pool_target"]),
                       conv_stride=cfg["trainer.ic_stride"])
    env = GridWorld(width=width, height=height, step_limit=cfg["env.step_limit"])
    rollout_rng = SplitMix64(seeds.next_u64())
    distill_rng = SplitMix64(seeds.next_u64())
    buffer = ReplayBuffer()
    kl_history = []
    for _ in range(cfg["distill.rounds"]):
        rollout_uniform_ic(env, backbone, heads, cfg["distill.steps_per_round"],
                           epsilon, rollout_rng, buffer=buffer)
        kl_history.append(distill_heads(
            buffer, backbone, heads, epochs=cfg["distill.epochs"],
            batch_size=cfg["distill.batch_size"], lr=cfg["distill.lr"],
            rng=distill_rng, stop_gradient=cfg["trainer.stop_gradient"]))
    bundle = ModelBundle(backbone=backbone, heads=heads, ensembles=None)
    from .config import parse_grid
    grid = parse_grid(cfg["distill.grid"])
    eval_seed = seeds.next_u64()
    points = eval_return_vs_cost(env, bundle, grid, cfg["distill.episodes"], eval_seed)
    base = base_policy_returns(env, backbone, cfg["distill.episodes"], eval_seed)
    return DistillResult(bundle=bundle, kl_history=kl_history,
                         return_points=points, base_returns=base)
