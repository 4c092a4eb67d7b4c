"""Edge decision policy: environment-aware actions, composite reward, PPO.

The policy observes the matcher's calibrated similarity, its short trend, the
current radio state, and pacing features, and picks one of four actions per
second: hold, raise the scan rate, pre-associate a candidate link, or hand
over.  Training maximizes a composite reward mixing transition-time
improvement against the threshold baseline, matching quality, and simulated
human feedback.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import EngineConfig
from .filters import FilterContext
from .mlp import Adam, TwoLayerNet, softmax
from .serialize import dump_tensors, fmt, parse_tensors
from .sim import (RawTrace, baseline_policy, feedback_oracle, fingerprint_at,
                  tts)

ACTIONS = ("hold", "scan_boost", "pre_associate", "handover")
N_ACTIONS = 4
STATE_DIM = 7


@dataclass
class PolicyState:
    """Features the policy conditions on, all roughly unit-scaled."""

    similarity: float = 0.0       # top-1 match similarity in [0, 1]
    sim_trend: float = 0.0        # change over the last 3 windows
    rssi: float = 0.0             # normalized current RSSI
    gnss_fix: float = 0.0
    step_rate: float = 0.0
    scan_age: float = 0.0
    on_cell: float = 0.0          # current link: 0 WiFi, 1 cellular

    def features(self) -> np.ndarray:
        v = np.array([self.similarity, self.sim_trend, self.rssi,
                      self.gnss_fix, self.step_rate, self.scan_age,
                      self.on_cell])
        if not np.all(np.isfinite(v)):
            raise ValueError("policy state features must be finite")
        return v


@dataclass(frozen=True)
class PolicyDecision:
    """An action in context, enough for the feedback oracle to score it."""

    action: str
    state: PolicyState
    time: float
    completion: float | None = None
    new_link: str = "cell"


@dataclass
class RewardWeights:
    eta: float = 1.0
    lam: float = 0.5
    gamma_hf: float = 2.0

    def __post_init__(self):
        if min(self.eta, self.lam, self.gamma_hf) < 0.0:
            raise ValueError("reward weights must be nonnegative")
        if self.eta == self.lam == self.gamma_hf == 0.0:
            raise ValueError("at least one reward weight must be positive")


def composite_reward(weights: RewardWeights, dtime: float, sim: float,
                     hf: float) -> float:
    """R = eta * dtime + lam * sim + gamma_hf * hf (exactly linear)."""
    return weights.eta * dtime + weights.lam * sim + weights.gamma_hf * hf


@dataclass
class PolicyModel:
    """Small map from state features to 4 action logits plus a value head."""

    net: TwoLayerNet

    @classmethod
    def from_seed(cls, seed: int, hidden: int = 32, n_inputs: int = STATE_DIM,
                  n_actions: int = N_ACTIONS, hold_bias: float = 0.0) -> "PolicyModel":
        """``hold_bias`` > 0 starts the policy conservative: holding is the
        prior and handover is rare, so exploration reaches late timesteps."""
        net = TwoLayerNet.from_seed(n_inputs, hidden, n_actions + 1, seed)
        if hold_bias:
            net.b2[0] += hold_bias
            net.b2[n_actions - 1] -= hold_bias
        return cls(net)

    @classmethod
    def zeros(cls, hidden: int = 32, n_inputs: int = STATE_DIM,
              n_actions: int = N_ACTIONS) -> "PolicyModel":
        return cls(TwoLayerNet.zeros(n_inputs, hidden, n_actions + 1))

    @property
    def n_actions(self) -> int:
        return self.net.b2.size - 1

    def logits_value(self, feats):
        out, _ = self.net.forward(np.asarray(feats, dtype=float))
        return out[..., :-1], out[..., -1]

    def serialize(self) -> str:
        return dump_tensors(self.net.tensors("policy."))

    @classmethod
    def deserialize(cls, text: str) -> "PolicyModel":
        return cls(TwoLayerNet.from_tensors(parse_tensors(text), "policy."))


def action_probs(model: PolicyModel, feats) -> np.ndarray:
    logits, _ = model.logits_value(feats)
    return softmax(logits)


def act(model: PolicyModel, state, mode: str = "sample", rng=None):
    """Pick an action; returns (action_index, log_prob, value).

    ``sample`` draws from the softmax; ``greedy`` takes the argmax with
    lowest-index tie-break.  Deterministic given (model, state, rng state).
    """
    feats = state.features() if isinstance(state, PolicyState) else np.asarray(state, dtype=float)
    logits, value = model.logits_value(feats)
    probs = softmax(logits)
    if mode == "greedy":
        idx = int(np.argmax(probs))
    elif mode == "sample":
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = int(rng.choice(len(probs), p=probs))
    else:
        raise ValueError(f"unknown mode: {mode!r}")
    return idx, float(np.log(probs[idx])), float(value)


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------


def imitate(model: PolicyModel, states, actions, epochs: int = 150,
            step_size: float = 0.02) -> PolicyModel:
    """Cross-entropy imitation of (state, action) pairs; value head untouched.

    Used to pre-train the deployable policy on the operational trigger rule
    before the online rounds adapt it.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=int)
    if states.shape[0] == 0:
        raise ValueError("empty imitation batch")
    net = model.net.copy()
    optimizer = Adam(net, lr=step_size)
    n = states.shape[0]
    n_actions = model.n_actions
    onehot = np.zeros((n, n_actions))
    onehot[np.arange(n), actions] = 1.0
    for _ in range(max(0, epochs)):
        out, cache = net.forward(states)
        probs = softmax(out[:, :n_actions])
        dlogits = (probs - onehot) / n
        dy = np.concatenate([dlogits, np.zeros((n, 1))], axis=1)
        grads, _ = net.backward(cache, dy)
        net = optimizer.step(net, grads)
    return PolicyModel(net)


def clipped_surrogate(ratio: float, advantage: float, clip_eps: float) -> float:
    """Per-sample PPO objective: min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


def gae_advantages(rewards, values, discount: float, lam: float):
    """Generalized advantage estimation over one episode (terminal value 0)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = rewards.size
    adv = np.zeros(T)
    gae = 0.0
    for t in range(T - 1, -1, -1):
        next_value = values[t + 1] if t + 1 < T else 0.0
        delta = rewards[t] + discount * next_value - values[t]
        gae = delta + discount * lam * gae
        adv[t] = gae
    returns = adv + values
    return adv, returns


@dataclass
class Trajectory:
    """One episode of interaction, with terminal reward components split out.

    Episodes always run to the trace horizon; steps after the switch
    completes are inert.  The terminal components (eta * dtime and
    gamma_hf * hf) attach at ``terminal_step``, the step where the switch
    completed (or the last step when censored).
    """

    states: np.ndarray            # (T, state_dim)
    actions: np.ndarray           # (T,)
    log_probs: np.ndarray
    values: np.ndarray
    step_rewards: np.ndarray      # per-step lam*sim + shaping
    dtime: float = 0.0
    hf: float | None = None       # None when direct feedback was withheld
    completion: float = 0.0
    censored: bool = False
    action_time: float | None = None
    terminal_step: int = -1
    policy_tts: float = 0.0
    baseline_tts: float = 0.0
    trace_checksum: str = ""
    sim_mean: float = 0.0

    def rewards_with(self, weights: RewardWeights, hf_value: float) -> np.ndarray:
        r = self.step_rewards.copy()
        r[self.terminal_step] += weights.eta * self.dtime + weights.gamma_hf * hf_value
        return r

    def total_reward(self, weights: RewardWeights, hf_value=None) -> float:
        hf_value = self.hf if hf_value is None else hf_value
        return float(self.rewards_with(weights, 0.0 if hf_value is None else hf_value).sum())

    def log_lines(self) -> list:
        lines = []
        for t in range(self.states.shape[0]):
            feats = " ".join(fmt(v) for v in self.states[t])
            lines.append(f"{t},{feats},{ACTIONS[int(self.actions[t])]},{fmt(self.step_rewards[t])}")
        hf = fmt(self.hf) if self.hf is not None else "nan"
        total = fmt(float(self.step_rewards.sum()) + self.dtime + (self.hf or 0.0))
        lines.append(f"TTS,{fmt(self.policy_tts)},{fmt(self.dtime)},{hf},{total}")
        return lines


def ppo_update(model: PolicyModel, batch, clip_eps: float = 0.2,
               epochs: int = 4, step_size: float = 0.02,
               gae_lambda: float = 0.95, discount: float = 0.99,
               entropy_coef: float = 0.01, value_coef: float = 0.5,
               weights: RewardWeights | None = None) -> PolicyModel:
    """Clipped-surrogate PPO over a batch of trajectories.

    Advantages come from GAE per episode, normalized across the batch; the
    value head trains on the GAE returns; an entropy bonus keeps exploration
    alive.  Returns a new model (plain gradient steps).
    """
    if not batch:
        raise ValueError("empty trajectory batch")
    if not 0.0 < clip_eps < 1.0:
        raise ValueError("clip epsilon must lie in (0, 1)")
    weights = weights or RewardWeights()

    states, actions, old_logp = [], [], []
    advantages, returns = [], []
    for traj in batch:
        hf_value = 0.0 if traj.hf is None else traj.hf
        rewards = traj.rewards_with(weights, hf_value)
        # the per-scenario baseline-TTS term inside dtime is a constant the
        # policy cannot influence; subtracting it is a per-episode reward
        # baseline that leaves the optimum unchanged and de-noises advantages
        rewards[traj.terminal_step] -= weights.eta * traj.baseline_tts
        adv, ret = gae_advantages(rewards, traj.values, discount, gae_lambda)
        states.append(traj.states)
        actions.append(traj.actions)
        old_logp.append(traj.log_probs)
        advantages.append(adv)
        returns.append(ret)
    states = np.concatenate(states)
    actions = np.concatenate(actions).astype(int)
    old_logp = np.concatenate(old_logp)
    advantages = np.concatenate(advantages)
    returns = np.concatenate(returns)
    std = advantages.std()
    if std > 1e-8:
        advantages = (advantages - advantages.mean()) / std

    net = model.net.copy()
    optimizer = Adam(net, lr=step_size)
    n = states.shape[0]
    n_actions = model.n_actions
    for _ in range(max(0, epochs)):
        out, cache = net.forward(states)
        logits, values = out[:, :n_actions], out[:, n_actions]
        probs = softmax(logits)
        logp_all = np.log(np.clip(probs, 1e-12, None))
        logp = logp_all[np.arange(n), actions]
        ratio = np.exp(logp - old_logp)
        clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
        # min(r*A, clip(r)*A) only passes gradient where the raw term is active
        use_raw = (ratio * advantages) <= (clipped * advantages)
        coef = np.where(use_raw, ratio * advantages, 0.0) / n
        onehot = np.zeros((n, n_actions))
        onehot[np.arange(n), actions] = 1.0
        dlogits = -coef[:, None] * (onehot - probs)

        # entropy bonus: H = -sum p log p; dH/dlogits = -p * (logp + H)
        entropy = -(probs * logp_all).sum(axis=1)
        dlogits += entropy_coef / n * (probs * (logp_all + entropy[:, None]))

        dvalues = value_coef * 2.0 * (values - returns) / n
        dy = np.concatenate([dlogits, dvalues[:, None]], axis=1)
        grads, _ = net.backward(cache, dy)
        net = optimizer.step(net, grads)
    return PolicyModel(net)


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


@dataclass
class MatcherStack:
    """Everything the matcher needs at decision time."""

    selector: object
    metric: object
    library: object
    band: int = 3
    cfg: EngineConfig = field(default_factory=EngineConfig)


class ScriptedPolicy:
    """Test/demo helper: act from a function of (t, PolicyState)."""

    def __init__(self, fn):
        self.fn = fn

    def decide(self, t, state):
        return self.fn(t, state)


def trigger_guide(cfg: EngineConfig):
    """The operational trigger rule used to seed exploration.

    Pre-associate and then hand over when either cue fires: a confident
    library match, or the egress fallback (a GNSS fix with WiFi already
    weak).  Training rollouts mix this in so well-timed switches appear in
    every batch; the learned policy is free to act earlier or later.
    """
    tau = cfg.reward.tau
    weak_rssi = (cfg.baseline.threshold_dbm + 65.0) / 35.0

    def guide(t, state: PolicyState, pre_associated: bool) -> str:
        triggered = (state.similarity >= tau
                     or (state.gnss_fix >= 0.5 and state.rssi <= weak_rssi))
        if triggered:
            return "handover" if pre_associated else "pre_associate"
        return "hold"

    return guide


def rollout(policy, scenario, stack: MatcherStack, mode: str = "sample",
            seed: int = 0, trace: RawTrace | None = None,
            weights: RewardWeights | None = None,
            guide=None, guide_eps: float = 0.0) -> Trajectory:
    """Step the simulated trace at 1 Hz and let the policy act.

    Action effects: scan_boost halves scan-age growth for a while,
    pre_associate cuts the eventual handover's association delay from 2 s to
    0.5 s, handover completes the switch; afterwards the episode keeps
    stepping inertly to the horizon so every rollout sees the same states.
    Per-step reward is lam * similarity plus shaping (trigger hint, healthy
    link credit); the completion step adds eta * dtime + gamma_hf * HF.
    """
    from .alignment import match as match_fn

    cfg = stack.cfg
    rng = np.random.default_rng(seed)
    weights = weights or RewardWeights(cfg.reward.eta, cfg.reward.lam,
                                       cfg.reward.gamma_hf)
    if trace is None:
        from .sim import generate
        trace = generate(scenario, cfg.radio, cfg.walker)
    base_completion, _ = baseline_policy(
        trace, cfg.baseline.threshold_dbm, cfg.baseline.hysteresis_db,
        cfg.baseline.dwell_s, cfg.baseline.assoc_delay_s)
    base_tts = tts(base_completion, trace.degradation_onset,
                   cfg.reward.tts_report_floor_s)

    device = cfg.device
    scan_times = set()
    next_scan = 0.0
    boost_until = -1.0
    pre_associated = False
    switched = False
    completion = None
    action_time = None
    sim_history = []
    states_v, actions_v, logps, values, rewards = [], [], [], [], []
    scripted = isinstance(policy, ScriptedPolicy)

    serving = trace.serving_rssi()
    horizon = int(trace.duration)
    windows = []
    last_scan = 0.0
    for step in range(1, horizon):
        t = float(step)
        # device scan schedule
        while next_scan <= t:
            scan_times.add(next_scan)
            last_scan = next_scan
            period = (device.boosted_period_s if next_scan < boost_until
                      else device.scan_period_s)
            next_scan += period
        scan_age = t - last_scan

        sec = min(step, len(trace.sec_t) - 1)
        rssi = float(serving[sec])
        sim_top = 0.0
        if not switched:
            windows.append(fingerprint_at(trace, t, cfg, scan_times))
            if len(windows) > cfg.window.buffer_windows:
                windows.pop(0)
            if len(windows) >= 2 and len(stack.library) > 0:
                live = (np.stack([w.features for w in windows]),
                        np.stack([w.present for w in windows]))
                ctx = FilterContext(
                    rssi_variance=float(np.var([w.features[3] for w in windows])),
                    scan_age=scan_age,
                    step_rate=max(0.0, float(np.mean([w.features[0] for w in windows]))),
                    presence=tuple(bool(b) for b in windows[-1].present))
                ranked = match_fn(stack.metric, stack.selector, live,
                                  stack.library, stack.band, 1, ctx)
                if ranked:
                    sim_top = ranked[0][1].similarity
        sim_history.append(sim_top)
        trend = sim_top - (sim_history[-4] if len(sim_history) >= 4 else 0.0)

        state = PolicyState(
            similarity=sim_top, sim_trend=trend,
            rssi=(rssi + 65.0) / 35.0,
            gnss_fix=1.0 if trace.gnss_fix[sec] else 0.0,
            step_rate=min(1.0, len([s for s in trace.step_times
                                    if t - 1.0 <= s < t]) / 3.0),
            scan_age=min(1.0, scan_age / 5.0),
            on_cell=1.0 if switched else 0.0)

        if scripted:
            idx = ACTIONS.index(policy.decide(t, state))
            logp, value = 0.0, 0.0
        elif (guide is not None and guide_eps > 0.0 and mode == "sample"
              and not switched):
            # behavior mixture: (1 - eps) * policy + eps * trigger rule;
            # the recorded log-prob is the mixture's, so the PPO ratio stays
            # a valid importance weight
            feats = state.features()
            logits, value = policy.logits_value(feats)
            probs = softmax(logits)
            mix = (1.0 - guide_eps) * probs
            mix[ACTIONS.index(guide(t, state, pre_associated))] += guide_eps
            idx = int(rng.choice(len(mix), p=mix))
            logp = float(np.log(mix[idx]))
            value = float(value)
        else:
            idx, logp, value = act(policy, state, mode, rng)
        action = ACTIONS[idx]

        reward = 0.0
        if not switched:
            reward = weights.lam * sim_top
            if rssi >= cfg.baseline.threshold_dbm:
                reward += cfg.reward.healthy_link_bonus
            bonus = cfg.reward.shaping_bonus
            if action == "handover":
                # one-shot trigger hint: act when the matcher is confident
                reward += bonus if sim_top >= cfg.reward.tau else -bonus
            elif action == "pre_associate":
                if not pre_associated and sim_top >= cfg.reward.tau:
                    reward += 0.5 * bonus
                elif pre_associated:
                    reward -= 0.05
            elif sim_top >= cfg.reward.tau:
                # sitting on a confident match delays the switch
                reward -= 0.3 * bonus

            if action == "scan_boost":
                boost_until = t + device.boost_duration_s
            elif action == "pre_associate":
                pre_associated = True
            elif action == "handover":
                delay = 0.5 if pre_associated else cfg.baseline.assoc_delay_s
                completion = t + delay
                action_time = t
                switched = True

        states_v.append(state.features())
        actions_v.append(idx)
        logps.append(logp)
        values.append(value)
        rewards.append(reward)

    censored = completion is None
    if censored:
        completion = float(trace.duration)
    policy_tts_report = tts(completion, trace.degradation_onset,
                            cfg.reward.tts_report_floor_s)
    policy_tts_reward = tts(completion, trace.degradation_onset,
                            cfg.reward.tts_reward_floor_s)
    dtime = base_tts - policy_tts_reward
    hf = feedback_oracle(completion, trace, reward_cfg=cfg.reward)
    terminal_step = min(len(rewards) - 1, max(0, int(round(completion)) - 1))

    traj = Trajectory(
        states=np.array(states_v), actions=np.array(actions_v),
        log_probs=np.array(logps), values=np.array(values),
        step_rewards=np.array(rewards), dtime=dtime, hf=hf,
        completion=completion, censored=censored,
        action_time=action_time, terminal_step=terminal_step,
        policy_tts=policy_tts_report, baseline_tts=base_tts,
        trace_checksum=trace.checksum(),
        sim_mean=float(np.mean(sim_history)) if sim_history else 0.0)
    return traj
