"""Multi-modal fingerprints and the on-device personalized library.

A fingerprint is one time-window's concatenated per-modality feature
summaries plus a presence/quality mask.  Sequences of fingerprints anchored
by switch events accumulate into a per-user library with rolling retention
and capacity-based eviction.  The module also provides the privacy side:
salted identifier hashing and desensitized summaries that carry no raw
identifiers and no absolute timestamps.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import LibraryConfig, NormalizationConfig, WindowConfig
from .serialize import fmt

MODALITIES = ("pdr", "wifi", "cell", "gnss", "time")
FEATURE_DIMS = {"pdr": 3, "wifi": 3, "cell": 3, "gnss": 3, "time": 2}
N_FEATURES = 14

FEATURE_NAMES = (
    "pdr_step_rate", "pdr_heading_change", "pdr_stop_flag",
    "wifi_topk_mean", "wifi_slope", "wifi_churn",
    "cell_rsrp", "cell_rsrq", "cell_change",
    "gnss_snr", "gnss_sats", "gnss_fix",
    "time_sin", "time_cos",
)

MODALITY_SLICES = {}
_off = 0
for _m in MODALITIES:
    MODALITY_SLICES[_m] = slice(_off, _off + FEATURE_DIMS[_m])
    _off += FEATURE_DIMS[_m]

SWITCH_KINDS = ("wifi_to_cell", "cell_to_wifi", "ap_handover")


# ---------------------------------------------------------------------------
# hashing
# ---------------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data, salt: str = "") -> int:
    """Stable 64-bit FNV-1a hash, salted; identical across runs and machines."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_OFFSET
    for b in salt.encode("utf-8") + bytes(data):
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_identifier(raw_id: str, salt: str) -> str:
    """Hash a raw identifier (BSSID, user id, ...) to an opaque token."""
    return f"h{fnv1a64(raw_id, salt):016x}"


def quantize(value: float, step: float) -> float:
    """Snap to the nearest multiple of ``step``."""
    return float(np.round(value / step) * step)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModalitySummary:
    """Fixed-length normalized feature vector for one modality."""

    kind: str
    features: tuple
    quality: float = 1.0

    def __post_init__(self):
        if self.kind not in MODALITIES:
            raise ValueError(f"unknown modality kind: {self.kind!r}")
        if len(self.features) != FEATURE_DIMS[self.kind]:
            raise ValueError(
                f"{self.kind} summary needs {FEATURE_DIMS[self.kind]} features, "
                f"got {len(self.features)}")
        if not all(math.isfinite(v) for v in self.features):
            raise ValueError("summary features must be finite")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError("quality must lie in [0, 1]")


class Fingerprint:
    """One window: 14 concatenated features + per-modality presence/quality.

    Immutable after construction; absent modalities keep their feature
    values but are ignored by every downstream cost computation.
    """

    __slots__ = ("timestamp", "features", "present", "quality")

    def __init__(self, timestamp: float, features, present, quality):
        features = np.asarray(features, dtype=float)
        present = np.asarray(present, dtype=bool)
        quality = np.asarray(quality, dtype=float)
        if features.shape != (N_FEATURES,):
            raise ValueError(f"features must have shape ({N_FEATURES},)")
        if present.shape != (len(MODALITIES),) or quality.shape != (len(MODALITIES),):
            raise ValueError("mask needs exactly one entry per modality")
        if not np.all(np.isfinite(features)):
            raise ValueError("fingerprint features must be finite")
        if np.any((quality < 0.0) | (quality > 1.0)):
            raise ValueError("qualities must lie in [0, 1]")
        self.timestamp = float(timestamp)
        self.features = features
        self.features.setflags(write=False)
        self.present = present
        self.present.setflags(write=False)
        self.quality = quality
        self.quality.setflags(write=False)

    @classmethod
    def from_summaries(cls, timestamp: float, summaries: dict, present: dict):
        feats = np.zeros(N_FEATURES)
        pres = np.zeros(len(MODALITIES), dtype=bool)
        qual = np.zeros(len(MODALITIES))
        for i, m in enumerate(MODALITIES):
            s = summaries[m]
            if s.kind != m:
                raise ValueError(f"summary kind {s.kind!r} placed under {m!r}")
            feats[MODALITY_SLICES[m]] = s.features
            pres[i] = bool(present.get(m, True))
            qual[i] = s.quality if pres[i] else 0.0
        return cls(timestamp, feats, pres, qual)

    def modality_features(self, kind: str) -> np.ndarray:
        return self.features[MODALITY_SLICES[kind]]

    def is_present(self, kind: str) -> bool:
        return bool(self.present[MODALITIES.index(kind)])

    def replace_features(self, features) -> "Fingerprint":
        return Fingerprint(self.timestamp, features, self.present, self.quality)


@dataclass(frozen=True)
class SwitchEvent:
    """A labeled network transition anchoring a fingerprint sequence."""

    time: float
    kind: str
    anchor: str = ""

    def __post_init__(self):
        if self.kind not in SWITCH_KINDS:
            raise ValueError(f"unknown switch kind: {self.kind!r}")


class FingerprintSequence:
    """Ordered fingerprint windows, optionally labeled with a switch event."""

    __slots__ = ("windows", "label", "created_at", "prototype_id", "_packed")

    def __init__(self, windows, label=None, created_at: int = 0,
                 prototype_id: str = ""):
        windows = tuple(windows)
        if len(windows) < 2:
            raise ValueError("a sequence needs at least 2 windows to warp")
        ts = [w.timestamp for w in windows]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("window timestamps must be strictly increasing")
        if label is not None and not (ts[0] <= label.time <= ts[-1] + 1.0):
            raise ValueError("switch event time outside the anchored sequence")
        self.windows = windows
        self.label = label
        self.created_at = int(created_at)
        self.prototype_id = prototype_id
        self._packed = None

    def __len__(self):
        return len(self.windows)

    def timestamps(self) -> np.ndarray:
        return np.array([w.timestamp for w in self.windows])

    def packed(self):
        """(features (T,14), present (T,5)) arrays; cached, read-only."""
        if self._packed is None:
            feats = np.stack([w.features for w in self.windows])
            pres = np.stack([w.present for w in self.windows])
            feats.setflags(write=False)
            pres.setflags(write=False)
            self._packed = (feats, pres)
        return self._packed

    def features(self) -> np.ndarray:
        return self.packed()[0]

    def present(self) -> np.ndarray:
        return self.packed()[1]

    def qualities(self) -> np.ndarray:
        return np.stack([w.quality for w in self.windows])

    def with_id(self, prototype_id: str, created_at=None) -> "FingerprintSequence":
        return FingerprintSequence(
            self.windows, self.label,
            self.created_at if created_at is None else created_at,
            prototype_id)


# ---------------------------------------------------------------------------
# window summarization
# ---------------------------------------------------------------------------


@dataclass
class WifiScan:
    time: float
    readings: list          # [(bssid: str, rssi_dbm: float), ...]


@dataclass
class CellSample:
    time: float
    cell_id: int
    rsrp: float
    rsrq: float


@dataclass
class GnssSample:
    time: float
    snr: float
    sats: float
    fix: bool


@dataclass
class RawWindow:
    """Per-modality raw samples for one window, time-aligned to the PDR ticks."""

    t_start: float
    t_end: float
    step_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    headings: np.ndarray = field(default_factory=lambda: np.zeros(0))
    wifi_scans: list = field(default_factory=list)
    cell_samples: list = field(default_factory=list)
    gnss_samples: list = field(default_factory=list)
    hour_of_day: float = 12.0

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def pdr_features(window: RawWindow):
    """Raw (step rate, heading change, stop flag) before normalization."""
    n_steps = len(window.step_times)
    rate = n_steps / window.duration if window.duration > 0 else 0.0
    if len(window.headings) >= 2:
        dh = _wrap_angle(float(window.headings[-1]) - float(window.headings[0]))
    else:
        dh = 0.0
    stop = 1.0 if n_steps == 0 else 0.0
    return rate, dh, stop


def least_squares_slope(times, values) -> float:
    """Slope of the least-squares line through (times, values)."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size < 2:
        return 0.0
    tc = t - t.mean()
    denom = float(np.dot(tc, tc))
    if denom == 0.0:
        return 0.0
    return float(np.dot(tc, v - v.mean()) / denom)


def wifi_features(window: RawWindow, top_k: int = 3):
    """Raw (top-K mean RSSI, strongest-RSSI slope, strongest-AP churn)."""
    scans = window.wifi_scans
    if not scans:
        raise ValueError("inconsistent mask: wifi marked present but window has no samples")
    topk_means, strongest_rssi, strongest_id, times = [], [], [], []
    for scan in scans:
        if not scan.readings:
            raise ValueError("inconsistent mask: wifi scan with no readings")
        ordered = sorted(scan.readings, key=lambda r: (-r[1], r[0]))
        top = ordered[:top_k]
        topk_means.append(sum(r[1] for r in top) / len(top))
        strongest_id.append(ordered[0][0])
        strongest_rssi.append(ordered[0][1])
        times.append(scan.time)
    churn = 0.0
    if len(strongest_id) >= 2:
        changes = sum(a != b for a, b in zip(strongest_id, strongest_id[1:]))
        churn = changes / (len(strongest_id) - 1)
    return (float(np.mean(topk_means)),
            least_squares_slope(times, strongest_rssi),
            churn)


def cell_features(window: RawWindow):
    samples = window.cell_samples
    if not samples:
        raise ValueError("inconsistent mask: cell marked present but window has no samples")
    rsrp = float(np.mean([s.rsrp for s in samples]))
    rsrq = float(np.mean([s.rsrq for s in samples]))
    ids = [s.cell_id for s in samples]
    change = 1.0 if any(a != b for a, b in zip(ids, ids[1:])) else 0.0
    return rsrp, rsrq, change


def gnss_features(window: RawWindow):
    samples = window.gnss_samples
    if not samples:
        raise ValueError("inconsistent mask: gnss marked present but window has no samples")
    snr = float(np.mean([s.snr for s in samples]))
    sats = float(np.mean([s.sats for s in samples]))
    fix = 1.0 if np.mean([1.0 if s.fix else 0.0 for s in samples]) >= 0.5 else 0.0
    return snr, sats, fix


def time_features(window: RawWindow):
    phase = 2.0 * math.pi * (window.hour_of_day % 24.0) / 24.0
    return math.sin(phase), math.cos(phase)


def summarize_window(window: RawWindow, present: dict,
                     quality: dict | None = None,
                     norm: NormalizationConfig | None = None) -> Fingerprint:
    """Summarize one raw window into a normalized Fingerprint.

    ``present`` maps modality name -> bool.  A modality marked present with
    an empty sample set raises ("inconsistent mask"); a modality marked
    absent gets zero features and zero quality, and is inert downstream.
    """
    norm = norm or NormalizationConfig()
    quality = quality or {}
    raw = {m: (0.0,) * FEATURE_DIMS[m] for m in MODALITIES}
    if present.get("pdr", False):
        raw["pdr"] = pdr_features(window)
    if present.get("wifi", False):
        raw["wifi"] = wifi_features(window)
    if present.get("cell", False):
        raw["cell"] = cell_features(window)
    if present.get("gnss", False):
        raw["gnss"] = gnss_features(window)
    if present.get("time", False):
        raw["time"] = time_features(window)

    summaries = {}
    for m in MODALITIES:
        names = FEATURE_NAMES[MODALITY_SLICES[m]]
        feats = tuple(norm.normalize(n, v) for n, v in zip(names, raw[m]))
        q = quality.get(m, 1.0 if present.get(m, False) else 0.0)
        summaries[m] = ModalitySummary(m, feats, q)
    t_mid = 0.5 * (window.t_start + window.t_end)
    return Fingerprint.from_summaries(t_mid, summaries, present)


# ---------------------------------------------------------------------------
# the library
# ---------------------------------------------------------------------------


def sequence_content_id(seq: FingerprintSequence, salt: str) -> str:
    """Stable prototype id from sequence content (never from wall-clock)."""
    feats, pres = seq.packed()
    payload = feats.tobytes() + pres.tobytes()
    kind = seq.label.kind if seq.label is not None else "unlabeled"
    return f"p{fnv1a64(payload + kind.encode('utf-8'), salt):016x}"


class FingerprintLibrary:
    """Per-user store of switch-anchored sequences with aging and capacity.

    Single-writer: commits and maintenance mutate the store; reads hand out
    immutable sequences and are safe from other threads.
    """

    def __init__(self, cfg: LibraryConfig | None = None):
        self.cfg = cfg or LibraryConfig()
        self.sequences: dict[str, FingerprintSequence] = {}

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(sorted(self.sequences))

    def get(self, prototype_id: str) -> FingerprintSequence:
        return self.sequences[prototype_id]

    def items(self):
        for pid in sorted(self.sequences):
            yield pid, self.sequences[pid]

    def commit_segment(self, buffer: FingerprintSequence, event: SwitchEvent,
                       created_day: int = 0,
                       min_windows: int | None = None) -> str:
        """Store a pre-switch buffer labeled by the switch that occurred."""
        min_windows = min_windows if min_windows is not None else WindowConfig().min_commit_windows
        if len(buffer) < max(2, min_windows):
            raise ValueError("insufficient context: pre-switch buffer too short")
        probe = FingerprintSequence(buffer.windows, replace(event, anchor=""),
                                    created_at=created_day)
        pid = sequence_content_id(probe, self.cfg.salt)
        seq = FingerprintSequence(buffer.windows, replace(event, anchor=pid),
                                  created_at=created_day, prototype_id=pid)
        self.sequences[pid] = seq
        self._enforce_capacity()
        return pid

    def commit_outdoor_transition(self, buffer: FingerprintSequence,
                                  gnss_ok: bool, wifi_decay: bool,
                                  pdr_exit: bool, created_day: int = 0,
                                  event: SwitchEvent | None = None):
        """Commit only when all three exit conditions hold; else store nothing."""
        if not (gnss_ok and wifi_decay and pdr_exit):
            return None
        if event is None:
            event = SwitchEvent(time=buffer.windows[-1].timestamp, kind="wifi_to_cell")
        return self.commit_segment(buffer, event, created_day)

    def maintain(self, current_day: int) -> "FingerprintLibrary":
        """Drop sequences older than the retention horizon; enforce capacity.

        Idempotent: a second call with the same day is a no-op.
        """
        horizon = current_day - self.cfg.retention_days
        stale = [pid for pid, seq in self.sequences.items()
                 if seq.created_at < horizon]
        for pid in stale:
            del self.sequences[pid]
        self._enforce_capacity()
        return self

    def _enforce_capacity(self):
        while len(self.sequences) > self.cfg.capacity:
            victim = min(self.sequences,
                         key=lambda pid: (self.sequences[pid].created_at, pid))
            del self.sequences[victim]


def maintain(library: FingerprintLibrary, current_day: int) -> FingerprintLibrary:
    return library.maintain(current_day)


# ---------------------------------------------------------------------------
# desensitization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesensitizedSummary:
    """Privacy-preserving digest of one sequence.

    Carries a salted hash of the prototype id, quantized per-feature
    aggregates, the switch kind, and window offsets relative to the first
    window.  No raw identifier and no absolute timestamp survives.
    """

    prototype_hash: str
    label_kind: str
    offsets: tuple
    feature_aggregates: tuple
    quality_aggregates: tuple

    def serialize(self) -> str:
        # quantized values print compactly; a privacy digest carries no
        # full-precision float noise
        def q(v):
            return format(round(v, 6), ".6g")

        lines = [
            f"proto {self.prototype_hash}",
            f"kind {self.label_kind}",
            "offsets " + " ".join(q(v) for v in self.offsets),
            "features " + " ".join(q(v) for v in self.feature_aggregates),
            "quality " + " ".join(q(v) for v in self.quality_aggregates),
        ]
        return "\n".join(lines) + "\n"


def desensitize(seq: FingerprintSequence, salt: str = "edge-default",
                quant_step: float = 0.1) -> DesensitizedSummary:
    """Produce the exportable summary of a sequence."""
    feats = seq.features()
    qual = seq.qualities()
    ts = seq.timestamps()
    offsets = tuple(float(t - ts[0]) for t in ts)
    aggregates = tuple(quantize(v, quant_step) for v in feats.mean(axis=0))
    quality_agg = tuple(quantize(v, quant_step) for v in qual.mean(axis=0))
    kind = seq.label.kind if seq.label is not None else "unlabeled"
    source = seq.prototype_id or sequence_content_id(seq, salt)
    return DesensitizedSummary(
        prototype_hash=hash_identifier(source, salt),
        label_kind=kind,
        offsets=offsets,
        feature_aggregates=aggregates,
        quality_aggregates=quality_agg,
    )


def contains_identifier_leak(serialized: str, raw_ids, min_len: int = 4) -> bool:
    """True if any length->=min_len substring of a raw id appears in the text."""
    for raw in raw_ids:
        raw = str(raw)
        if len(raw) < min_len:
            if raw in serialized:
                return True
            continue
        for i in range(len(raw) - min_len + 1):
            if raw[i:i + min_len] in serialized:
                return True
    return False


# ---------------------------------------------------------------------------
# persistence: one window per line
# ---------------------------------------------------------------------------

_HEADER = ("t," + ",".join(FEATURE_NAMES) + ","
           + ",".join(f"mask_{m}" for m in MODALITIES) + ","
           + ",".join(f"q_{m}" for m in MODALITIES))


def sequence_to_lines(seq: FingerprintSequence) -> list:
    lines = [_HEADER]
    for w in seq.windows:
        parts = [fmt(w.timestamp)]
        parts += [fmt(v) for v in w.features]
        parts += [str(int(v)) for v in w.present]
        parts += [fmt(v) for v in w.quality]
        lines.append(",".join(parts))
    return lines


def write_sequence(path, seq: FingerprintSequence) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(sequence_to_lines(seq)) + "\n")


def read_sequence(path, label: SwitchEvent | None = None,
                  created_at: int = 0, prototype_id: str = "") -> FingerprintSequence:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("t,"):
        raise ValueError(f"{path}: missing header line")
    windows = []
    n_mod = len(MODALITIES)
    for ln in lines[1:]:
        parts = ln.split(",")
        t = float(parts[0])
        feats = [float(v) for v in parts[1:1 + N_FEATURES]]
        pres = [bool(int(v)) for v in parts[1 + N_FEATURES:1 + N_FEATURES + n_mod]]
        qual = [float(v) for v in parts[1 + N_FEATURES + n_mod:1 + N_FEATURES + 2 * n_mod]]
        windows.append(Fingerprint(t, feats, pres, qual))
    return FingerprintSequence(windows, label, created_at, prototype_id)


def save_library(library: FingerprintLibrary, directory) -> None:
    """One file per sequence plus an index of (id, created_at, label kind)."""
    import os
    os.makedirs(directory, exist_ok=True)
    index_lines = []
    for pid, seq in library.items():
        write_sequence(os.path.join(directory, f"{pid}.fpseq"), seq)
        kind = seq.label.kind if seq.label is not None else "unlabeled"
        index_lines.append(f"{pid},{seq.created_at},{kind}")
    with open(os.path.join(directory, "index.txt"), "w", encoding="utf-8") as f:
        f.write("prototype_id,created_at,label_kind\n")
        f.write("\n".join(index_lines) + ("\n" if index_lines else ""))


def load_library(directory, cfg: LibraryConfig | None = None) -> FingerprintLibrary:
    import os
    lib = FingerprintLibrary(cfg)
    index_path = os.path.join(directory, "index.txt")
    with open(index_path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    for ln in lines[1:]:
        pid, day, kind = ln.split(",")
        label = None
        seq_path = os.path.join(directory, f"{pid}.fpseq")
        seq = read_sequence(seq_path, None, int(day), pid)
        if kind != "unlabeled":
            label = SwitchEvent(time=seq.windows[-1].timestamp, kind=kind, anchor=pid)
            seq = FingerprintSequence(seq.windows, label, int(day), pid)
        lib.sequences[pid] = seq
    return lib
