"""Classical DSP synthesis of gramophone noise components and guide frames.

Hiss is white noise through a cascade of RBJ-cookbook peaking/shelving
biquads. Thumps are a damped chirp tail preceded by a short
high-variance noise attack. Clicks are Poisson events with log-uniform
durations and log-normal amplitudes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal

from .dataset import frame_length


class GuideError(ValueError):
    pass


def db_to_gain(db: float) -> float:
    return 0.0 if db == -math.inf else 10.0 ** (db / 20.0)


# ---------------------------------------------------------------- biquads

def peaking_sos(fc, gain_db, q, fs) -> np.ndarray:
    a = 10 ** (gain_db / 40)
    w0 = 2 * math.pi * fc / fs
    alpha = math.sin(w0) / (2 * q)
    b = [1 + alpha * a, -2 * math.cos(w0), 1 - alpha * a]
    den = [1 + alpha / a, -2 * math.cos(w0), 1 - alpha / a]
    return _normalize(b, den)


def shelf_sos(fc, gain_db, fs, kind: str, slope: float = 1.0) -> np.ndarray:
    a = 10 ** (gain_db / 40)
    w0 = 2 * math.pi * fc / fs
    cw, sw = math.cos(w0), math.sin(w0)
    alpha = sw / 2 * math.sqrt((a + 1 / a) * (1 / slope - 1) + 2)
    k = 2 * math.sqrt(a) * alpha
    if kind == "low":
        b = [a * ((a + 1) - (a - 1) * cw + k), 2 * a * ((a - 1) - (a + 1) * cw), a * ((a + 1) - (a - 1) * cw - k)]
        den = [(a + 1) + (a - 1) * cw + k, -2 * ((a - 1) + (a + 1) * cw), (a + 1) + (a - 1) * cw - k]
    else:
        b = [a * ((a + 1) + (a - 1) * cw + k), -2 * a * ((a - 1) + (a + 1) * cw), a * ((a + 1) + (a - 1) * cw - k)]
        den = [(a + 1) - (a - 1) * cw + k, 2 * ((a - 1) - (a + 1) * cw), (a + 1) - (a - 1) * cw - k]
    return _normalize(b, den)


def _normalize(b, a) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64) / a[0]
    a = np.asarray(a, dtype=np.float64) / a[0]
    if np.any(np.abs(np.roots(a)) >= 1.0):
        raise GuideError("unstable biquad coefficients")
    return np.concatenate([b, a])


# ---------------------------------------------------------------- specs

@dataclass
class EqBand:
    center: float
    gain_db: float
    q: float = 1.0


@dataclass
class Shelf:
    corner: float
    gain_db: float


@dataclass
class GainModulation:
    rate: float = 1.3
    depth_db: float = 3.0


@dataclass
class HissSpec:
    eq_bands: list[EqBand] = field(default_factory=list)
    lowshelf: Shelf | None = None
    highshelf: Shelf | None = None
    level_db: float = 0.0
    time_variation: GainModulation | None = None

    def sections(self, fs) -> np.ndarray:
        sos = []
        for band in self.eq_bands:
            if band.q <= 0:
                raise GuideError(f"EQ band at {band.center} Hz has non-positive Q")
            if not 0 < band.center < fs / 2:
                raise GuideError(f"EQ band center {band.center} Hz outside (0, fs/2)")
            sos.append(peaking_sos(band.center, band.gain_db, band.q, fs))
        for shelf, kind in ((self.lowshelf, "low"), (self.highshelf, "high")):
            if shelf is not None:
                if not 0 < shelf.corner < fs / 2:
                    raise GuideError(f"{kind} shelf corner {shelf.corner} Hz outside (0, fs/2)")
                sos.append(shelf_sos(shelf.corner, shelf.gain_db, fs, kind))
        return np.array(sos).reshape(-1, 6)


@dataclass
class ClickSpec:
    rate: float = 2000.0
    duration_range: tuple[float, float] = (20e-6, 4e-3)
    amplitude: dict = field(default_factory=lambda: {"kind": "lognormal", "median": 0.02, "sigma": 1.0})

    def validate(self, length_s: float):
        lo, hi = self.duration_range
        if self.rate < 0:
            raise GuideError("click rate must be >= 0")
        if not 0 <= lo <= hi <= length_s:
            raise GuideError("click duration_range must satisfy 0 <= lo <= hi <= frame length")
        if self.amplitude.get("kind") not in ("lognormal", "constant"):
            raise GuideError(f"unknown click amplitude distribution {self.amplitude.get('kind')!r}")


@dataclass
class ThumpParams:
    a_tail: float = 0.3
    tau_e: float = 0.04
    f_max: float = 60.0
    f_min: float = 20.0
    tau_f: float = 0.03
    onset: float = 0.17
    attack_duration: float = 0.002
    attack_variance: float = 0.05

    def validate(self):
        if not self.f_max >= self.f_min > 0:
            raise GuideError("thump needs f_max >= f_min > 0")
        if self.tau_e <= 0 or self.tau_f <= 0:
            raise GuideError("thump time constants must be positive")
        if self.attack_duration < 0 or self.attack_variance < 0:
            raise GuideError("thump attack duration/variance must be >= 0")


@dataclass
class HumSpec:
    fundamental: float = 50.0
    harmonic_amplitudes: list[float] = field(default_factory=lambda: [0.01, 0.005, 0.003])
    phase_seed: int = 0


@dataclass
class RumbleSpec:
    cutoff: float = 40.0
    level_db: float = -30.0


@dataclass
class GuideSpec:
    fs: int = 8000
    length: float | None = None
    hiss: HissSpec | None = None
    thumps: list[ThumpParams] = field(default_factory=list)
    clicks: ClickSpec | None = None
    hum: HumSpec | None = None
    rumble: RumbleSpec | None = None
    gain_db: float = 0.0

    def __post_init__(self):
        if self.hiss is None and not self.thumps and self.clicks is None and self.hum is None and self.rumble is None:
            raise GuideError("guide spec needs at least one component")
        if self.fs <= 0:
            raise GuideError("fs must be positive")

    @property
    def sample_count(self) -> int:
        if self.length is None:
            return frame_length(self.fs)
        return int(round(self.length * self.fs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GuideSpec":
        d = dict(d)
        for key, typ in (("clicks", ClickSpec), ("hum", HumSpec), ("rumble", RumbleSpec)):
            if d.get(key) is not None and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        if isinstance(d.get("clicks"), ClickSpec):
            d["clicks"].duration_range = tuple(d["clicks"].duration_range)
        if d.get("hiss") is not None and isinstance(d["hiss"], dict):
            h = dict(d["hiss"])
            h["eq_bands"] = [EqBand(**b) for b in h.get("eq_bands", [])]
            for k in ("lowshelf", "highshelf"):
                if h.get(k) is not None:
                    h[k] = Shelf(**h[k])
            if h.get("time_variation") is not None:
                h["time_variation"] = GainModulation(**h["time_variation"])
            d["hiss"] = HissSpec(**h)
        d["thumps"] = [ThumpParams(**t) if isinstance(t, dict) else t for t in d.get("thumps", [])]
        return cls(**d)


# ---------------------------------------------------------------- components

def thump_frequency(p: ThumpParams, fs, n):
    """Instantaneous oscillation frequency f_n of the tail, n counted from onset."""
    n = np.asarray(n, dtype=np.float64)
    return (p.f_max - p.f_min) * np.exp(-n / (fs * p.tau_f)) + p.f_min


def thump_tail(p: ThumpParams, fs, n):
    n = np.asarray(n, dtype=np.float64)
    f_n = thump_frequency(p, fs, n)
    return p.a_tail * np.exp(-n / (fs * p.tau_e)) * np.sin(2 * np.pi * n * f_n / fs - np.pi / 4)


def synth_thump(p: ThumpParams, fs, length: int, rng: np.random.Generator) -> np.ndarray:
    """Render one thump: noise attack faded out over 1 ms, plus the damped tail."""
    p.validate()
    start = int(round(p.onset * fs))
    if not 0 <= start < length:
        raise GuideError(f"thump onset {p.onset} s lies outside the frame")
    out = np.zeros(length)
    n = np.arange(length - start)
    out[start:] = thump_tail(p, fs, n)
    n_attack = int(round(p.attack_duration * fs))
    n_fade = int(round(1e-3 * fs))
    window = np.concatenate([np.ones(n_attack), 0.5 + 0.5 * np.cos(np.pi * np.arange(1, n_fade + 1) / (n_fade + 1))])
    window = window[: length - start]
    noise = rng.standard_normal(len(window)) * math.sqrt(p.attack_variance)
    out[start:start + len(window)] += window * noise
    return out


def synth_hiss(spec: HissSpec, fs, length: int, rng: np.random.Generator) -> np.ndarray:
    sos = spec.sections(fs)
    x = rng.standard_normal(length)
    if len(sos):
        x = signal.sosfilt(sos, x)
    x = x * db_to_gain(spec.level_db)
    if spec.time_variation is not None:
        tv = spec.time_variation
        phase = rng.uniform(0, 2 * np.pi)
        t = np.arange(length) / fs
        x = x * 10 ** (tv.depth_db / 20 * np.sin(2 * np.pi * tv.rate * t + phase))
    return x


def click_events(spec: ClickSpec, fs, length: int, rng: np.random.Generator):
    """Draw (onsets in samples, durations in seconds, signed amplitudes)."""
    spec.validate(length / fs)
    count = int(rng.poisson(spec.rate * length / fs))
    onsets = np.sort(rng.integers(0, length, size=count))
    lo, hi = spec.duration_range
    lo_eff = max(lo, 1e-9)
    durations = np.exp(rng.uniform(math.log(lo_eff), math.log(max(hi, lo_eff)), size=count))
    amp = spec.amplitude
    if amp["kind"] == "lognormal":
        mags = amp["median"] * np.exp(amp["sigma"] * rng.standard_normal(count))
    else:
        mags = np.full(count, float(amp["value"]))
    signs = rng.choice([-1.0, 1.0], size=count)
    return onsets, durations, signs * mags


def click_kernel(duration: float, fs) -> np.ndarray:
    """Bipolar impulse under a decaying window, ``max(1, round(duration*fs))`` samples long."""
    m = max(1, int(round(duration * fs)))
    if m == 1:
        return np.ones(1)
    k = np.arange(m)
    window = np.exp(-4.0 * k / m)
    pulse = np.convolve([1.0, -0.6], window)[:m]
    return pulse / np.max(np.abs(pulse))


def synth_clicks(spec: ClickSpec, fs, length: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(length)
    for onset, dur, amp in zip(*click_events(spec, fs, length, rng)):
        k = click_kernel(dur, fs)
        end = min(length, onset + len(k))
        out[onset:end] += amp * k[: end - onset]
    return out


def synth_hum(spec: HumSpec, fs, length: int) -> np.ndarray:
    h = len(spec.harmonic_amplitudes)
    if spec.fundamental <= 0:
        raise GuideError("hum fundamental must be positive")
    if h and spec.fundamental * h >= fs / 2:
        raise GuideError(f"hum harmonic {h} at {spec.fundamental * h} Hz aliases at fs={fs}")
    phases = np.random.default_rng(spec.phase_seed).uniform(0, 2 * np.pi, size=h)
    n = np.arange(length)
    out = np.zeros(length)
    for k, (a, phi) in enumerate(zip(spec.harmonic_amplitudes, phases), start=1):
        out += a * np.sin(2 * np.pi * k * spec.fundamental * n / fs + phi)
    return out


def synth_rumble(spec: RumbleSpec, fs, length: int, rng: np.random.Generator) -> np.ndarray:
    """4th-order Butterworth low-passed noise, scaled to unit RMS times the level."""
    if not 0 < spec.cutoff < fs / 2:
        raise GuideError(f"rumble cutoff {spec.cutoff} Hz outside (0, fs/2)")
    sos = signal.butter(4, spec.cutoff, btype="low", fs=fs, output="sos")
    # warm-up so the filter starts in steady state
    warm = int(4 * fs / spec.cutoff)
    x = signal.sosfilt(sos, rng.standard_normal(length + warm))[warm:]
    rms = math.sqrt(float(np.mean(x * x)))
    gain = db_to_gain(spec.level_db)
    return x * (gain / rms) if rms > 0 else x


# ---------------------------------------------------------------- composition

COMPONENTS = ("hiss", "clicks", "thumps", "hum", "rumble")


def component_rngs(rng: np.random.Generator) -> dict[str, np.random.Generator]:
    """One independent child stream per component, spawned in fixed order."""
    return dict(zip(COMPONENTS, rng.spawn(len(COMPONENTS))))


def render_components(spec: GuideSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    fs, n = spec.fs, spec.sample_count
    rngs = component_rngs(rng)
    parts, errors = {}, []

    def attempt(name, fn):
        try:
            parts[name] = fn()
        except GuideError as e:
            errors.append(f"{name}: {e}")

    if spec.hiss is not None:
        attempt("hiss", lambda: synth_hiss(spec.hiss, fs, n, rngs["hiss"]))
    if spec.clicks is not None:
        attempt("clicks", lambda: synth_clicks(spec.clicks, fs, n, rngs["clicks"]))
    if spec.thumps:
        attempt("thumps", lambda: sum(synth_thump(t, fs, n, rngs["thumps"]) for t in spec.thumps))
    if spec.hum is not None:
        attempt("hum", lambda: synth_hum(spec.hum, fs, n))
    if spec.rumble is not None:
        attempt("rumble", lambda: synth_rumble(spec.rumble, fs, n, rngs["rumble"]))
    if errors:
        raise GuideError("; ".join(errors))
    return parts


def compose_guide(spec: GuideSpec, rng: np.random.Generator) -> np.ndarray:
    """Sum of all enabled components times the headroom gain."""
    parts = render_components(spec, rng)
    total = np.zeros(spec.sample_count)
    for name in COMPONENTS:
        if name in parts:
            total = total + parts[name]
    return total * db_to_gain(spec.gain_db)


# ---------------------------------------------------------------- presets

def preset(name: str, fs: int = 8000, rng: np.random.Generator | None = None) -> GuideSpec:
    """Named guide recipes. ``rng`` jitters the recipe for corpus generation."""
    j = (lambda lo, hi: float(rng.uniform(lo, hi))) if rng is not None else (lambda lo, hi: (lo + hi) / 2)
    hiss = HissSpec(
        eq_bands=[EqBand(center=min(j(800, 2500), fs * 0.4), gain_db=j(-6, 8), q=j(0.5, 2.0))],
        lowshelf=Shelf(corner=200.0, gain_db=j(0, 6)),
        highshelf=Shelf(corner=min(3000.0, fs * 0.4), gain_db=j(-12, -3)),
        level_db=j(-24, -18),
        time_variation=GainModulation(rate=78 / 60, depth_db=j(0.5, 2.0)),
    )
    if name == "hiss-thumps":
        return GuideSpec(fs=fs, hiss=hiss, thumps=[ThumpParams(onset=0.17)])
    if name == "hiss-clicks":
        return GuideSpec(fs=fs, hiss=hiss, clicks=ClickSpec(rate=j(1000, 2500)))
    if name == "hiss":
        return GuideSpec(fs=fs, hiss=hiss)
    if name == "full":
        return GuideSpec(fs=fs, hiss=hiss, thumps=[ThumpParams(onset=0.17)], clicks=ClickSpec(rate=2000.0),
                         hum=HumSpec(), rumble=RumbleSpec())
    raise GuideError(f"unknown preset {name!r}; choose from {PRESETS}")


PRESETS = ("hiss-thumps", "hiss-clicks", "hiss", "full")


def render_corpus(preset_name: str, count: int, duration: float, fs: int, seed: int) -> list[np.ndarray]:
    """Long noise excerpts for training, one jittered recipe per file."""
    root = np.random.default_rng(seed)
    out = []
    for child in root.spawn(count):
        spec = preset(preset_name, fs, rng=child)
        spec.length = duration
        out.append(compose_guide(spec, child))
    return out
