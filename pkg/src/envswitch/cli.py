"""Command-line harness: simulate traces, train the stack, evaluate TTS.

``envswitch simulate`` writes fingerprint-window traces plus ground-truth
sidecars; ``train`` builds per-site libraries from baseline-triggered
switches, trains the alignment metric and filter selector, runs the
cloud-edge rounds, and writes every model; ``evaluate`` replays held-out
sessions through both the threshold baseline and the greedy learned policy
on identical traces and emits per-session TTS tables.
"""

import argparse
import os
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .alignment import MetricModel, make_alignment_loss, pairs_from_switch_tags, train_metric
from .cloudedge import (EdgeAgent, RewardModel, RoundState, offline_update,
                        run_round)
from .config import EngineConfig, load_config
from .fingerprints import (FingerprintLibrary, FingerprintSequence,
                           SwitchEvent, fnv1a64, load_library, save_library,
                           write_sequence)
from .filters import FilterContext, SelectorModel, train_selector
from .policy import (MatcherStack, PolicyModel, ScriptedPolicy, imitate,
                     rollout, trigger_guide)
from .serialize import fmt
from .sim import (baseline_policy, detect_outdoor_transition, fingerprint_at,
                  generate, make_scenario, scenario_text, segment_before,
                  truth_text, tts)

SITES_BY_FLAG = {"A": "A_indoor", "B": "B_door_egress", "C": "C_apartment_mixed"}
PAPER_SESSION_COUNTS = {"A": 5, "B": 10, "C": 6}
TRAIN_SESSIONS_PER_SITE = 6
EVAL_SEED_OFFSET = 10_000


@dataclass
class SessionReport:
    site: str
    session: int
    baseline_tts: float
    proposed_tts: float

    @property
    def improvement(self) -> float:
        return self.baseline_tts - self.proposed_tts

    @property
    def relative(self) -> float | None:
        if self.baseline_tts > 0:
            return self.improvement / self.baseline_tts
        return None


def round2(value: float) -> str:
    """Display rounding: two decimals, half-up."""
    return str(Decimal(repr(value)).quantize(Decimal("0.01"), ROUND_HALF_UP))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def trace_to_sequence(trace, cfg: EngineConfig) -> FingerprintSequence:
    windows = []
    t = cfg.window.window_s
    while t <= trace.duration:
        windows.append(fingerprint_at(trace, t, cfg))
        t += cfg.window.window_s
    return FingerprintSequence(windows)


def cmd_simulate(site_flags, sessions: int, seed: int, out_dir: str,
                 cfg: EngineConfig) -> list:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for flag in site_flags:
        site = SITES_BY_FLAG[flag]
        for k in range(sessions):
            session_seed = seed + k
            scenario = make_scenario(site, session_seed, cfg.radio, cfg.walker)
            trace = generate(scenario, cfg.radio, cfg.walker)
            stem = os.path.join(out_dir, f"trace_{flag}_{session_seed}")
            write_sequence(stem + ".csv", trace_to_sequence(trace, cfg))
            with open(stem + ".truth", "w", encoding="utf-8") as f:
                f.write(truth_text(trace))
            with open(stem + ".scenario", "w", encoding="utf-8") as f:
                f.write(scenario_text(scenario))
            written.append(stem)
    return written


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def build_site_library(site_flag: str, seeds, cfg: EngineConfig):
    """Commit pre-switch buffers from baseline-triggered switches.

    Sites A and B anchor on the moment the baseline switch completes; site C
    commits only when the GNSS/WiFi/PDR exit conditions jointly hold.
    Returns (library, traces, scenarios).
    """
    site = SITES_BY_FLAG[site_flag]
    capacity = min(cfg.library.capacity, cfg.cloudedge.edge_library_capacity)
    library = FingerprintLibrary(replace(cfg.library, capacity=capacity))
    traces, scenarios = [], []
    for day, s in enumerate(seeds):
        scenario = make_scenario(site, s, cfg.radio, cfg.walker)
        trace = generate(scenario, cfg.radio, cfg.walker)
        scenarios.append(scenario)
        traces.append(trace)
        if site_flag == "C":
            flags, t_detect = detect_outdoor_transition(trace, cfg)
            if t_detect is None:
                continue
            buffer = segment_before(trace, t_detect, cfg)
            library.commit_outdoor_transition(
                buffer, *flags, created_day=day,
                event=SwitchEvent(buffer.windows[-1].timestamp, "wifi_to_cell"))
        else:
            completion, censored = baseline_policy(
                trace, cfg.baseline.threshold_dbm, cfg.baseline.hysteresis_db,
                cfg.baseline.dwell_s, cfg.baseline.assoc_delay_s)
            if censored:
                continue
            anchor_t = min(completion, trace.duration - 1.0)
            buffer = segment_before(trace, anchor_t, cfg)
            event = SwitchEvent(buffer.windows[-1].timestamp, "wifi_to_cell")
            library.commit_segment(buffer, event, created_day=day)
    return library, traces, scenarios


def _early_segment(trace, cfg: EngineConfig, rng) -> FingerprintSequence:
    """A background (non-pre-switch) segment from the first part of a walk."""
    n = cfg.window.buffer_windows
    latest = max(n + 1.0, trace.degradation_onset - n)
    t_end = float(rng.uniform(n, latest))
    return segment_before(trace, t_end, cfg)


def _context_for(seq) -> FilterContext:
    feats = seq.features()
    pres = seq.present()
    rssi_var = float(np.var(feats[:, 3] * 35.0))        # denormalized top-K mean
    step_rate = float(np.clip(np.mean(feats[:, 0] * 1.5 + 1.5), 0.0, 10.0))
    return FilterContext(rssi_variance=rssi_var, scan_age=0.0,
                         step_rate=step_rate,
                         presence=tuple(bool(b) for b in pres.all(axis=0)))


def build_training_pairs(libraries, traces_by_site, cfg: EngineConfig, seed: int):
    """Positive/negative alignment pairs across every site.

    Positives pair a committed pre-switch buffer with another session's
    prototype of the same kind (via the switch-tag pairing); negatives add
    early-walk segments and time-shuffled prototypes so that similarity rises
    only near a genuine transition.
    """
    rng = np.random.default_rng(fnv1a64(f"pairs:{seed}"))
    pairs = []
    for flag, library in libraries.items():
        segments = [seq for _, seq in library.items()]
        if len(segments) < 2:
            continue
        base = pairs_from_switch_tags(
            segments, library, cfg.match.negatives_per_positive, seed=seed)
        traces = traces_by_site[flag]
        enriched = []
        for (positive, negatives) in base:
            extra = []
            for _ in range(2):
                trace = traces[int(rng.integers(len(traces)))]
                extra.append((_early_segment(trace, cfg, rng), positive[1]))
            enriched.append((positive, negatives[:2] + extra))
        pairs.extend(enriched)
    if not pairs:
        raise ValueError("no training pairs; libraries too small")
    return pairs


def train_models(seed: int, cfg: EngineConfig, rounds: int | None = None,
                 log=print):
    """Full training pipeline; returns (selector, metric, policy, reward, stacks)."""
    rounds = rounds if rounds is not None else cfg.cloudedge.n_rounds
    libraries, traces_by_site, scenarios_by_site = {}, {}, {}
    for flag in ("A", "B", "C"):
        seeds = [seed + 100 * {"A": 1, "B": 2, "C": 3}[flag] + k
                 for k in range(TRAIN_SESSIONS_PER_SITE)]
        lib, traces, scenarios = build_site_library(flag, seeds, cfg)
        libraries[flag] = lib
        traces_by_site[flag] = traces
        scenarios_by_site[flag] = scenarios
        log(f"site {flag}: committed {len(lib)} prototypes")

    pairs = build_training_pairs(libraries, traces_by_site, cfg, seed)
    metric = MetricModel.from_seed(fnv1a64(f"metric:{seed}") % (2 ** 32),
                                   cfg.match.embed_dim)
    metric = train_metric(metric, pairs, epochs=25, step_size=0.15,
                          margin=cfg.match.margin, gamma=cfg.match.gamma_soft,
                          band=cfg.match.band)
    log(f"metric trained on {len(pairs)} pairs; "
        f"weights {np.array2string(metric.weights, precision=3)}")

    selector = SelectorModel.from_seed(fnv1a64(f"selector:{seed}") % (2 ** 32),
                                       cfg.filters)
    selector_items = []
    for positive, negatives in pairs:
        pos_item = (positive[0].features(), positive[0].present(),
                    positive[1].features(), positive[1].present())
        neg_items = []
        for nq, np_ in negatives[:2]:
            nq_f, nq_p = _seq_arrays(nq)
            np_f, np_p = _seq_arrays(np_)
            neg_items.append((nq_f, nq_p, np_f, np_p))
        selector_items.append((_context_for(positive[0]), pos_item, neg_items))
    loss_fn = make_alignment_loss(metric, cfg.match.margin,
                                  cfg.match.gamma_soft, cfg.match.band)
    selector = train_selector(selector, selector_items, loss_fn,
                              epochs=5, step_size=0.05)
    log("selector trained")

    stacks, edges = {}, []
    for flag in ("A", "B", "C"):
        stack = MatcherStack(selector=selector, metric=metric,
                             library=libraries[flag], band=cfg.match.band,
                             cfg=cfg)
        stacks[flag] = stack

    policy = PolicyModel.from_seed(fnv1a64(f"policy:{seed}") % (2 ** 32),
                                   cfg.ppo.hidden)
    policy = pretrain_on_trigger_rule(policy, stacks, scenarios_by_site, cfg)
    log("policy pre-trained on the trigger rule")

    for flag in ("A", "B", "C"):
        edges.append(EdgeAgent(
            edge_id=f"edge-{flag}", stack=stacks[flag],
            scenarios=scenarios_by_site[flag], policy=policy))

    state = RoundState(
        round_index=0, n_rounds=rounds,
        cloud_policy=edges[0].policy, cloud_version=0,
        reward_model=RewardModel.from_seed(fnv1a64(f"reward:{seed}") % (2 ** 32)),
        edge_versions={e.edge_id: 0 for e in edges})
    for r in range(rounds):
        state = run_round(state, edges, cfg, seed=seed)
        log(f"round {state.round_index} mean_reward {round2(state.mean_rewards[-1])}")

    # on-device personalization: each edge adapts the distilled policy to its
    # own accumulated logs with bounded offline updates
    edge_policies = {}
    for edge in edges:
        personalized = edge.policy
        for _ in range(cfg.cloudedge.personalization_passes):
            personalized = offline_update(personalized, edge.local_log,
                                          step_size=0.05)
        flag = edge.edge_id.split("-")[-1]
        edge_policies[flag] = personalized
        log(f"edge {edge.edge_id} personalized on {len(edge.local_log)} episodes")
    return (selector, metric, state.cloud_policy, state.reward_model, stacks,
            state, edge_policies)


def _seq_arrays(seq):
    if isinstance(seq, FingerprintSequence):
        feats, pres = seq.packed()
        return np.array(feats), np.array(pres)
    feats, pres = seq
    return np.array(feats), np.array(pres)


def pretrain_on_trigger_rule(policy, stacks, scenarios_by_site,
                             cfg: EngineConfig) -> PolicyModel:
    """Imitate the operational trigger rule before the online rounds.

    The cloud pre-trains the deployable policy on scripted rollouts of the
    similarity-trigger rule across every site, so the initial greedy
    behavior is already a sane switcher; the rounds then adapt it.
    """
    guide = trigger_guide(cfg)
    states, actions = [], []
    for flag, scenarios in scenarios_by_site.items():
        for scenario in scenarios[:3]:
            tracker = {"pre": False}

            def scripted(t, state, tracker=tracker):
                action = guide(t, state, tracker["pre"])
                if action == "pre_associate":
                    tracker["pre"] = True
                return action

            traj = rollout(ScriptedPolicy(scripted), scenario, stacks[flag])
            states.append(traj.states)
            actions.append(traj.actions)
    return imitate(policy, np.concatenate(states), np.concatenate(actions),
                   epochs=120, step_size=0.02)


def cmd_train(seed: int, out_dir: str, cfg: EngineConfig,
              rounds: int | None = None, log=print):
    os.makedirs(out_dir, exist_ok=True)
    (selector, metric, policy, reward_model, stacks, state,
     edge_policies) = train_models(seed, cfg, rounds, log)
    with open(os.path.join(out_dir, "selector.txt"), "w", encoding="utf-8") as f:
        f.write(selector.serialize())
    with open(os.path.join(out_dir, "metric.txt"), "w", encoding="utf-8") as f:
        f.write(metric.serialize())
    with open(os.path.join(out_dir, "policy.txt"), "w", encoding="utf-8") as f:
        f.write(policy.serialize())
    with open(os.path.join(out_dir, "reward_model.txt"), "w", encoding="utf-8") as f:
        f.write(reward_model.serialize())
    for flag, edge_policy in edge_policies.items():
        path = os.path.join(out_dir, f"policy_edge_{flag}.txt")
        with open(path, "w", encoding="utf-8") as f:
            f.write(edge_policy.serialize())
    for flag, stack in stacks.items():
        save_library(stack.library, os.path.join(out_dir, f"lib_{flag}"))
    with open(os.path.join(out_dir, "train_log.txt"), "w", encoding="utf-8") as f:
        for i, r in enumerate(state.mean_rewards, 1):
            f.write(f"round {i} mean_reward {fmt(r)}\n")
    return out_dir


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def load_models(model_dir: str, cfg: EngineConfig):
    def read(name):
        path = os.path.join(model_dir, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing model file: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return f.read()

    selector = SelectorModel.deserialize(read("selector.txt"), cfg.filters)
    metric = MetricModel.deserialize(read("metric.txt"))
    policy = PolicyModel.deserialize(read("policy.txt"))
    stacks, edge_policies = {}, {}
    for flag in ("A", "B", "C"):
        lib_dir = os.path.join(model_dir, f"lib_{flag}")
        library = load_library(lib_dir, cfg.library)
        stacks[flag] = MatcherStack(selector=selector, metric=metric,
                                    library=library, band=cfg.match.band,
                                    cfg=cfg)
        edge_path = os.path.join(model_dir, f"policy_edge_{flag}.txt")
        if os.path.exists(edge_path):
            with open(edge_path, "r", encoding="utf-8") as f:
                edge_policies[flag] = PolicyModel.deserialize(f.read())
        else:
            edge_policies[flag] = policy
    return selector, metric, policy, stacks, edge_policies


def evaluate_site(flag: str, policy, stack, sessions: int, seed: int,
                  cfg: EngineConfig):
    site = SITES_BY_FLAG[flag]
    reports, checksums = [], []
    for k in range(sessions):
        session_seed = seed + EVAL_SEED_OFFSET + k
        scenario = make_scenario(site, session_seed, cfg.radio, cfg.walker)
        trace = generate(scenario, cfg.radio, cfg.walker)
        base_completion, _ = baseline_policy(
            trace, cfg.baseline.threshold_dbm, cfg.baseline.hysteresis_db,
            cfg.baseline.dwell_s, cfg.baseline.assoc_delay_s)
        base_tts = tts(base_completion, trace.degradation_onset,
                       cfg.reward.tts_report_floor_s)
        traj = rollout(policy, scenario, stack, mode="greedy",
                       seed=session_seed, trace=trace)
        reports.append(SessionReport(site, k + 1, base_tts, traj.policy_tts))
        checksums.append((k + 1, trace.checksum(), traj.trace_checksum))
    return reports, checksums


def render_table(site: str, reports) -> str:
    """Human-readable table shaped like the per-site session tables."""
    header = ["".ljust(18)] + [f"D{r.session}".rjust(8) for r in reports]
    rows = [
        ("Baseline TTS (s)", [r.baseline_tts for r in reports]),
        ("Proposed TTS (s)", [r.proposed_tts for r in reports]),
        ("Improvement (s)", [r.improvement for r in reports]),
    ]
    lines = [f"Site {site} ({len(reports)} sessions)", "".join(header)]
    for name, values in rows:
        lines.append(name.ljust(18) + "".join(round2(v).rjust(8) for v in values))
    improvements = [r.improvement for r in reports]
    rels = [r.relative for r in reports if r.relative is not None]
    lines.append(f"Average improvement (s): {round2(float(np.mean(improvements)))}")
    if rels:
        lines.append("Mean of per-session relative improvements: "
                     f"{round2(100.0 * float(np.mean(rels)))}%")
    mean_base = float(np.mean([r.baseline_tts for r in reports]))
    if mean_base > 0:
        lines.append("Ratio of mean improvement to mean baseline: "
                     f"{round2(100.0 * float(np.mean(improvements)) / mean_base)}%")
    return "\n".join(lines) + "\n"


def report_csv(reports) -> str:
    lines = ["site,session,baseline_tts,proposed_tts,improvement,relative"]
    for r in reports:
        rel = fmt(r.relative) if r.relative is not None else "nan"
        lines.append(f"{r.site},{r.session},{fmt(r.baseline_tts)},"
                     f"{fmt(r.proposed_tts)},{fmt(r.improvement)},{rel}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(site_flags, sessions_map, seed: int, model_dir: str,
                 out_dir: str, cfg: EngineConfig, log=print):
    os.makedirs(out_dir, exist_ok=True)
    _, _, _, stacks, edge_policies = load_models(model_dir, cfg)
    all_reports = {}
    for flag in site_flags:
        reports, checksums = evaluate_site(
            flag, edge_policies[flag], stacks[flag], sessions_map[flag], seed, cfg)
        all_reports[flag] = reports
        with open(os.path.join(out_dir, f"report_{flag}.csv"), "w",
                  encoding="utf-8") as f:
            f.write(report_csv(reports))
        table = render_table(SITES_BY_FLAG[flag], reports)
        with open(os.path.join(out_dir, f"report_{flag}.txt"), "w",
                  encoding="utf-8") as f:
            f.write(table)
        with open(os.path.join(out_dir, f"sessions_{flag}.log"), "w",
                  encoding="utf-8") as f:
            for session, base_sum, policy_sum in checksums:
                f.write(f"session {session} baseline_trace {base_sum} "
                        f"policy_trace {policy_sum}\n")
        log(table)
    return all_reports


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="envswitch",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train", "evaluate"):
        sp = sub.add_parser(name)
        sp.add_argument("--site", choices=["A", "B", "C", "all"], default="all")
        sp.add_argument("--sessions", type=int, default=None,
                        help="sessions per site (default: per-site table)")
        sp.add_argument("--seed", type=int, default=13)
        sp.add_argument("--config", default=None, help="key-value config file")
        sp.add_argument("--out", default="out")
        sp.add_argument("--rounds", type=int, default=None,
                        help="cloud-edge rounds (train only)")
        if name == "evaluate":
            sp.add_argument("--models", default=None,
                            help="model directory (default: --out)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = EngineConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    flags = ["A", "B", "C"] if args.site == "all" else [args.site]

    if args.command == "simulate":
        sessions = args.sessions if args.sessions is not None else 5
        written = cmd_simulate(flags, sessions, args.seed, args.out, cfg)
        print(f"wrote {len(written)} traces to {args.out}")
    elif args.command == "train":
        cmd_train(args.seed, args.out, cfg, args.rounds)
        print(f"models written to {args.out}")
    elif args.command == "evaluate":
        sessions_map = {f: (args.sessions if args.sessions is not None
                            else PAPER_SESSION_COUNTS[f]) for f in flags}
        model_dir = args.models if args.models else args.out
        cmd_evaluate(flags, sessions_map, args.seed, model_dir, args.out, cfg)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
