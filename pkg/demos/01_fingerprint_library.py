"""Build a personalized fingerprint library from one simulated day.

Walks through the passive-collection side: a simulated indoor session is
windowed into multi-modal fingerprints, the 10 s before the switch becomes a
library prototype, retention prunes old entries, and the desensitized
summary shows what (and only what) would ever leave the device.
"""

import numpy as np

from envswitch.config import EngineConfig
from envswitch.fingerprints import (FEATURE_NAMES, FingerprintLibrary,
                                    SwitchEvent, desensitize)
from envswitch.sim import baseline_policy, generate, make_scenario, segment_before

cfg = EngineConfig()

# One office-indoor session: the user walks from their desk toward a far
# wing, WiFi decays, the baseline heuristic eventually switches to cellular.
scenario = make_scenario("A", seed=7, radio=cfg.radio, walker=cfg.walker)
trace = generate(scenario, cfg.radio, cfg.walker)
completion, censored = baseline_policy(
    trace, cfg.baseline.threshold_dbm, cfg.baseline.hysteresis_db,
    cfg.baseline.dwell_s, cfg.baseline.assoc_delay_s)
print(f"degradation onset at {scenario.degradation_onset:6.2f} s")
print(f"baseline switch completes at {completion:6.2f} s (censored={censored})")

# The pre-switch buffer: ten 1 s windows, each a 14-feature fingerprint
buffer = segment_before(trace, completion, cfg)
print(f"\npre-switch buffer: {len(buffer)} windows x {buffer.features().shape[1]} features")
mid = buffer.windows[5]
print("one window, feature by feature:")
for name, value, in zip(FEATURE_NAMES, mid.features):
    print(f"  {name:20s} {value:+.3f}")
print(f"  presence mask        {mid.present.astype(int)}")

# Commit the segment; the library enforces retention and capacity
library = FingerprintLibrary(cfg.library)
event = SwitchEvent(buffer.windows[-1].timestamp, "wifi_to_cell")
pid = library.commit_segment(buffer, event, created_day=0)
print(f"\ncommitted prototype {pid} (library size {len(library)})")

for day in range(1, 4):
    sc = make_scenario("A", seed=7 + day, radio=cfg.radio, walker=cfg.walker)
    tr = generate(sc, cfg.radio, cfg.walker)
    comp, cens = baseline_policy(tr, cfg.baseline.threshold_dbm,
                                 cfg.baseline.hysteresis_db,
                                 cfg.baseline.dwell_s,
                                 cfg.baseline.assoc_delay_s)
    if not cens:
        buf = segment_before(tr, comp, cfg)
        library.commit_segment(buf, SwitchEvent(buf.windows[-1].timestamp,
                                                "wifi_to_cell"), created_day=day)
print(f"after three more days: {len(library)} prototypes")

# What the cloud would see: hashed id, relative offsets, quantized aggregates
summary = desensitize(library.get(pid), salt=cfg.library.salt)
print("\ndesensitized summary (the only exportable view):")
print(summary.serialize())

library.maintain(current_day=20)   # everything older than 14 days ages out
print(f"after a quiet two weeks + maintenance: {len(library)} prototypes")
