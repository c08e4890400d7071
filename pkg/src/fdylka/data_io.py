"""TSV manifests, prediction writers and the synthetic soundscape generator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import CLIP_SAMPLES, SAMPLE_RATE, write_wav
from .errors import ContractError, InputError, ParseError
from .evaluation import CLIP_SECONDS, Event

DESED_CLASSES = (
    "Alarm_bell_ringing",
    "Blender",
    "Cat",
    "Dishes",
    "Dog",
    "Electric_shaver_toothbrush",
    "Frying",
    "Running_water",
    "Speech",
    "Vacuum_cleaner",
)

HEADERS = {
    "strong": ["filename", "onset", "offset", "event_label"],
    "weak": ["filename", "event_labels"],
    "unlabeled": ["filename"],
}


@dataclass
class DatasetManifest:
    """Parsed manifest.

    ``records`` holds :class:`Event` objects for strong manifests,
    ``(clip_id, frozenset(labels))`` pairs for weak ones and bare clip ids
    for unlabeled ones.
    """

    kind: str
    records: list
    vocab: tuple

    def clip_ids(self) -> list[str]:
        if self.kind == "strong":
            ids = [r.clip_id for r in self.records]
        elif self.kind == "weak":
            ids = [r[0] for r in self.records]
        else:
            ids = list(self.records)
        return list(dict.fromkeys(ids))

    def events_by_clip(self) -> dict[str, list[Event]]:
        if self.kind != "strong":
            raise ContractError(f"{self.kind} manifest has no events")
        out: dict[str, list[Event]] = {}
        for ev in self.records:
            out.setdefault(ev.clip_id, []).append(ev)
        return out


def clip_id_of(filename: str) -> str:
    return filename[:-4] if filename.lower().endswith(".wav") else filename


def _float(token: str, lineno: int, path) -> float:
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"malformed number {token!r}", line=lineno, path=path) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite number {token!r}", line=lineno, path=path)
    return v


def parse_manifest(path, kind: str, vocab=DESED_CLASSES) -> DatasetManifest:
    """Strictly parse a DCASE-style TSV manifest.

    Args:
        path: TSV file with a header row.
        kind: ``strong``, ``weak`` or ``unlabeled``.
        vocab: Allowed class labels.

    Returns:
        DatasetManifest with records in file order.
    """
    if kind not in HEADERS:
        raise ContractError(f"unknown manifest kind {kind!r}")
    # vocab=None accepts any label and records the ones seen
    open_vocab = vocab is None
    vocab = () if open_vocab else tuple(vocab)
    known = set(vocab)
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != HEADERS[kind]:
        raise ParseError(f"expected header {'<TAB>'.join(HEADERS[kind])!r}", line=1, path=path)
    records: list = []
    width = len(HEADERS[kind])
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != width:
            raise ParseError(f"expected {width} columns, got {len(cols)}", line=lineno, path=path)
        clip = clip_id_of(cols[0])
        if not clip:
            raise ParseError("empty filename", line=lineno, path=path)
        if kind == "strong":
            onset = _float(cols[1], lineno, path)
            offset = _float(cols[2], lineno, path)
            if cols[3] not in known and not open_vocab:
                raise ParseError(f"unknown class {cols[3]!r}", line=lineno, path=path)
            if not 0.0 <= onset < offset <= CLIP_SECONDS:
                raise ParseError(
                    f"event span [{onset}, {offset}] outside [0, {CLIP_SECONDS}]", line=lineno, path=path
                )
            records.append(Event(clip, onset, offset, cols[3]))
        elif kind == "weak":
            labels = [t for t in cols[1].split(",") if t]
            for t in labels:
                if t not in known and not open_vocab:
                    raise ParseError(f"unknown class {t!r}", line=lineno, path=path)
            records.append((clip, frozenset(labels)))
        else:
            records.append(clip)
    if open_vocab:
        seen = set()
        for r in records:
            if kind == "strong":
                seen.add(r.label)
            elif kind == "weak":
                seen |= r[1]
        vocab = tuple(sorted(seen))
    return DatasetManifest(kind, records, vocab)


def _write_lines(path, lines) -> None:
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def write_strong(events, path) -> None:
    """Strong TSV sorted by (clip_id, onset), seconds to 3 decimals."""
    rows = sorted(events, key=lambda e: (e.clip_id, e.onset, e.offset, e.label))
    lines = ["\t".join(HEADERS["strong"])]
    lines += [f"{e.clip_id}.wav\t{e.onset:.3f}\t{e.offset:.3f}\t{e.label}" for e in rows]
    _write_lines(path, lines)


write_predictions = write_strong


def write_weak(records, path) -> None:
    lines = ["\t".join(HEADERS["weak"])]
    lines += [f"{clip}.wav\t{','.join(sorted(labels))}" for clip, labels in sorted(records, key=lambda r: r[0])]
    _write_lines(path, lines)


def write_unlabeled(clip_ids, path) -> None:
    _write_lines(path, ["filename"] + [f"{c}.wav" for c in sorted(clip_ids)])


def weak_projection(events, clip_ids=None) -> list[tuple[str, frozenset]]:
    """Per-clip set of classes with at least one event."""
    labels: dict[str, set] = {c: set() for c in (clip_ids or [])}
    for ev in events:
        labels.setdefault(ev.clip_id, set()).add(ev.label)
    return [(c, frozenset(s)) for c, s in sorted(labels.items())]


def write_pseudolabels(grids, path, class_names, decode_cfg=None, thresholds=None) -> Path:
    """Decode pseudo-label grids to a strong TSV plus a provenance sidecar.

    Args:
        grids: Iterable of PseudoLabelGrid.
        path: Output TSV path.
        class_names: Column names of the grids.
        decode_cfg: DecodeConfig for event extraction; the 0/1 grids are
            thresholded at 0.5 so only the median window matters.
        thresholds: Mapping recorded verbatim in the sidecar.

    Returns:
        Path of the sidecar file.
    """
    from .evaluation import DecodeConfig, decode

    decode_cfg = decode_cfg or DecodeConfig()
    events = []
    side = ["filename\tsource\tthresholds"]
    for g in grids:
        events.extend(decode(g.labels, class_names, decode_cfg, g.clip_id))
        side.append(f"{g.clip_id}.wav\t{g.source}\t{json.dumps(thresholds or {}, sort_keys=True)}")
    write_strong(events, path)
    sidecar = Path(str(path) + ".provenance.tsv")
    _write_lines(sidecar, side)
    return sidecar


# ---------------------------------------------------------------------------
# synthetic soundscapes
# ---------------------------------------------------------------------------

EDGE_SECONDS = 0.010
MIN_EVENT_SECONDS = 0.25
MAX_OVERLAP = 5


@dataclass(frozen=True)
class ClassGenerator:
    kind: str  # "tone" or "noise"
    freq_range: tuple[float, float]  # tone frequency or noise band edges in Hz
    amplitude_range: tuple[float, float] = (0.1, 0.3)


def default_generators(n: int) -> list[ClassGenerator]:
    """Alternate tone and band-noise generators over disjoint log-spaced bands."""
    edges = np.geomspace(300.0, 6000.0, n + 1)
    gens = []
    for i in range(n):
        lo, hi = float(edges[i]), float(edges[i + 1])
        if i % 2 == 0:
            gens.append(ClassGenerator("tone", (lo, lo + 0.4 * (hi - lo))))
        else:
            gens.append(ClassGenerator("noise", (lo, hi)))
    return gens


@dataclass
class SynthSpec:
    clip_count: int = 20
    classes: tuple = DESED_CLASSES[:3]
    generators: list | None = None
    events_per_clip: tuple[int, int] = (1, 3)
    duration_range: tuple[float, float] = (0.5, 3.0)
    background_level: float = 0.005
    weak_count: int = 0
    unlabeled_count: int = 0
    seed: int = 0
    prefix: str = "synth"

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if self.generators is None:
            self.generators = default_generators(len(self.classes))
        self.generators = [g if isinstance(g, ClassGenerator) else ClassGenerator(**g) for g in self.generators]
        if len(self.generators) != len(self.classes):
            raise ContractError("one generator per class required")
        lo, hi = self.events_per_clip
        if not 0 <= lo <= hi:
            raise ContractError(f"bad events_per_clip {self.events_per_clip}")
        if self.duration_range[0] < MIN_EVENT_SECONDS or self.duration_range[1] > CLIP_SECONDS:
            raise ContractError(f"event durations must lie in [{MIN_EVENT_SECONDS}, {CLIP_SECONDS}] s")
        if self.weak_count + self.unlabeled_count > self.clip_count:
            raise ContractError("weak + unlabeled splits exceed clip count")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d


@dataclass
class SynthResult:
    audio_dir: Path
    clip_ids: list = field(default_factory=list)
    events: list = field(default_factory=list)
    strong_ids: list = field(default_factory=list)
    weak_ids: list = field(default_factory=list)
    unlabeled_ids: list = field(default_factory=list)


def _raised_cosine_envelope(n: int, edge: int) -> np.ndarray:
    env = np.ones(n)
    edge = min(edge, n // 2)
    if edge > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(edge) + 0.5) / edge)
        env[:edge] = ramp
        env[n - edge :] = ramp[::-1]
    return env


def _render_event(gen: ClassGenerator, n: int, rng: np.random.Generator) -> np.ndarray:
    amp = rng.uniform(*gen.amplitude_range)
    if gen.kind == "tone":
        f = rng.uniform(*gen.freq_range)
        sig = np.sqrt(2.0) * np.sin(2 * np.pi * f * np.arange(n) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi))
    elif gen.kind == "noise":
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        spec[(freqs < gen.freq_range[0]) | (freqs > gen.freq_range[1])] = 0.0
        sig = np.fft.irfft(spec, n)
        sig /= max(np.sqrt(np.mean(sig**2)), 1e-12)
    else:
        raise ContractError(f"unknown generator kind {gen.kind!r}")
    return amp * sig * _raised_cosine_envelope(n, int(EDGE_SECONDS * SAMPLE_RATE))


def _max_overlap(spans) -> int:
    points = sorted([(a, 1) for a, _ in spans] + [(b, -1) for _, b in spans])
    depth = best = 0
    for _, d in points:
        depth += d
        best = max(best, depth)
    return best


def synth_clip(spec: SynthSpec, index: int) -> tuple[np.ndarray, list[Event]]:
    """Render clip ``index``; its RNG stream depends only on (seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    clip_id = f"{spec.prefix}_{index:04d}"
    audio = spec.background_level * rng.standard_normal(CLIP_SAMPLES)
    n_events = int(rng.integers(spec.events_per_clip[0], spec.events_per_clip[1] + 1))
    events: list[Event] = []
    spans: list[tuple[float, float]] = []
    for _ in range(n_events):
        c = int(rng.integers(len(spec.classes)))
        dur = rng.uniform(*spec.duration_range)
        # millisecond grid keeps manifest times exactly on rendered samples
        onset = round(rng.uniform(0.0, CLIP_SECONDS - dur), 3)
        offset = min(round(onset + dur, 3), CLIP_SECONDS)
        if _max_overlap(spans + [(onset, offset)]) > MAX_OVERLAP:
            continue
        a, b = int(round(onset * SAMPLE_RATE)), int(round(offset * SAMPLE_RATE))
        audio[a:b] += _render_event(spec.generators[c], b - a, rng)
        spans.append((onset, offset))
        events.append(Event(clip_id, onset, offset, spec.classes[c]))
    peak = np.max(np.abs(audio))
    if peak > 0.99:
        audio *= 0.99 / peak
    return audio, sorted(events)


def synth_generate(spec: SynthSpec, out_dir) -> SynthResult:
    """Write ``audio/*.wav`` and the manifests under ``out_dir``.

    Files written: ``strong.tsv`` (strong split), ``weak.tsv`` (weak split,
    projected from ground truth), ``unlabeled.tsv``, ``ground_truth.tsv``
    (events of every clip) and ``synth_spec.json``.
    """
    out = Path(out_dir)
    audio_dir = out / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    res = SynthResult(audio_dir)
    n_strong = spec.clip_count - spec.weak_count - spec.unlabeled_count
    for i in range(spec.clip_count):
        audio, events = synth_clip(spec, i)
        clip_id = f"{spec.prefix}_{i:04d}"
        write_wav(audio_dir / f"{clip_id}.wav", audio)
        res.clip_ids.append(clip_id)
        res.events.extend(events)
        if i < n_strong:
            res.strong_ids.append(clip_id)
        elif i < n_strong + spec.weak_count:
            res.weak_ids.append(clip_id)
        else:
            res.unlabeled_ids.append(clip_id)
    strong_set = set(res.strong_ids)
    write_strong(res.events, out / "ground_truth.tsv")
    write_strong([e for e in res.events if e.clip_id in strong_set], out / "strong.tsv")
    weak_events = [e for e in res.events if e.clip_id in set(res.weak_ids)]
    write_weak(weak_projection(weak_events, res.weak_ids), out / "weak.tsv")
    write_unlabeled(res.unlabeled_ids, out / "unlabeled.tsv")
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return res


def load_synth_spec(path) -> SynthSpec:
    d = json.loads(Path(path).read_text())
    allowed = set(SynthSpec.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise InputError(f"unknown synth spec keys: {sorted(unknown)}")
    for key in ("events_per_clip", "duration_range"):
        if key in d:
            d[key] = tuple(d[key])
    if d.get("generators"):
        d["generators"] = [
            ClassGenerator(g["kind"], tuple(g["freq_range"]), tuple(g.get("amplitude_range", (0.1, 0.3))))
            for g in d["generators"]
        ]
    return SynthSpec(**d)
