"""Synthetic continual task stream of glyph images paired with template captions.

Each class owns a small set of glyphs (a shape drawn in a colour at a grid
cell).  The image renders those glyphs; the caption names them through a
fixed slot template, so the two modalities share one latent description.
Tasks own disjoint glyph blocks, which gives every task its own visual and
lexical domain while reusing the same primitive shapes and colours.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
NUM_SPECIAL = 3

SPLITS = ("train", "test", "query", "gallery")
MANIFEST_VERSION = 1

N_SHAPES = 6
PALETTE = np.array(
    [
        [1.0, 0.15, 0.15],
        [0.15, 1.0, 0.15],
        [0.2, 0.35, 1.0],
        [1.0, 0.9, 0.1],
        [0.95, 0.2, 0.95],
        [0.1, 0.95, 0.95],
    ],
    dtype=np.float32,
)
GRID = 3
# fixed, seed-independent glyph table: rendering must not depend on stream seed
_GLYPH_TABLE_SEED = 20231
_MAX_GLYPHS = N_SHAPES * len(PALETTE) * GRID * GRID


class ManifestError(ValueError):
    """Raised for malformed or invalid manifest content."""


@dataclass
class StreamConfig:
    num_tasks: int = 5
    classes_per_task: list[int] = field(default_factory=lambda: [20] * 5)
    zipf_exponent: float = 1.0
    samples_total: int = 2500
    image_size: int = 32
    vocab_size: int = 256
    seed: int = 0
    max_seq_len: int = 14
    glyphs_per_task: int = 16
    glyphs_per_class: int = 3
    noise_level: float = 0.3
    max_fillers: int = 4
    test_min_count: int = 2
    query_rate: float = 0.005
    gallery_rate: float = 0.1
    grammar: str = "compositional"

    def validate(self) -> None:
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if len(self.classes_per_task) != self.num_tasks:
            raise ValueError("classes_per_task must list one entry per task")
        if any(c < 1 for c in self.classes_per_task):
            raise ValueError("every task needs at least one class")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        if self.vocab_size <= 0:
            raise ValueError("vocab_size must be positive")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")
        if self.glyphs_per_class > self.glyphs_per_task:
            raise ValueError("glyphs_per_class exceeds glyphs_per_task")
        n_glyphs = self.num_tasks * self.glyphs_per_task
        if n_glyphs > _MAX_GLYPHS:
            raise ValueError(f"at most {_MAX_GLYPHS} glyphs are available")
        for t, c in enumerate(self.classes_per_task):
            combos = math.comb(self.glyphs_per_task, self.glyphs_per_class)
            if c > combos:
                raise ValueError(f"task {t}: {c} classes but only {combos} glyph combinations")
        if self.vocab_size < filler_start(self) + 1:
            raise ValueError("vocab_size too small for the caption grammar")
        if self.grammar not in ("compositional", "glyph"):
            raise ValueError(f"unknown caption grammar {self.grammar!r}")
        per_glyph = 3 if self.grammar == "compositional" else 1
        if 1 + per_glyph * self.glyphs_per_class > self.max_seq_len:
            raise ValueError("max_seq_len cannot hold the domain and attribute tokens")


@dataclass
class ClassSpec:
    class_id: int
    task_id: int
    attribute_vector: np.ndarray
    sample_count: int
    vocab_size: int = 256
    max_seq_len: int = 14
    max_fillers: int = 4
    image_size: int = 32
    num_tasks: int = 1
    grammar: str = "compositional"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClassSpec):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and self.task_id == other.task_id
            and self.sample_count == other.sample_count
            and np.array_equal(self.attribute_vector, other.attribute_vector)
        )


@dataclass
class ImageTextPair:
    image: np.ndarray
    caption: list[int]
    class_id: int
    task_id: int
    pair_id: int
    instance_seed: int = 0
    noise_level: float = 0.0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageTextPair):
            return NotImplemented
        return (
            self.pair_id == other.pair_id
            and self.class_id == other.class_id
            and self.task_id == other.task_id
            and list(self.caption) == list(other.caption)
            and np.array_equal(self.image, other.image)
        )


@dataclass
class TaskDataset:
    task_id: int
    train: list[ImageTextPair] = field(default_factory=list)
    test: list[ImageTextPair] = field(default_factory=list)
    query: list[ImageTextPair] = field(default_factory=list)
    gallery: list[ImageTextPair] = field(default_factory=list)

    def split(self, name: str) -> list[ImageTextPair]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    @property
    def class_ids(self) -> set[int]:
        return {p.class_id for s in SPLITS for p in self.split(s)}


@dataclass
class TaskStream:
    tasks: list[TaskDataset]
    seed: int = 0
    config: StreamConfig | None = None
    classes: list[ClassSpec] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tasks)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaskStream):
            return NotImplemented
        return self.seed == other.seed and self.tasks == other.tasks and self.classes == other.classes


# --------------------------------------------------------------------------
# grammar helpers


def domain_token(task_id: int) -> int:
    return NUM_SPECIAL + task_id


def attribute_token(glyph: int, cfg_num_tasks: int) -> int:
    return NUM_SPECIAL + cfg_num_tasks + glyph


N_WORDS = N_SHAPES + len(PALETTE) + GRID * GRID


def _attribute_words(num_tasks: int, n_glyphs: int, grammar: str) -> int:
    return N_WORDS if grammar == "compositional" else n_glyphs


def filler_start(cfg: StreamConfig) -> int:
    n_glyphs = cfg.num_tasks * cfg.glyphs_per_task
    return NUM_SPECIAL + cfg.num_tasks + _attribute_words(cfg.num_tasks, n_glyphs, cfg.grammar)


def glyph_words(glyph_row: np.ndarray, base: int) -> list[int]:
    """Colour, shape and position words of one glyph."""
    shape, colour, cell = (int(x) for x in glyph_row)
    return [base + colour, base + len(PALETTE) + shape, base + len(PALETTE) + N_SHAPES + cell]


def glyph_table(n: int) -> np.ndarray:
    """Rows of (shape, colour, cell) for glyph ids 0..n-1, all distinct."""
    rng = np.random.default_rng(_GLYPH_TABLE_SEED)
    combos = np.array(
        [(s, c, g) for s in range(N_SHAPES) for c in range(len(PALETTE)) for g in range(GRID * GRID)]
    )
    # spread consecutive glyphs over cells so a task block is not crammed into one cell
    order = rng.permutation(len(combos))
    combos = combos[order]
    return combos[:n]


def _shape_mask(shape: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
    half = size / 2.0
    if shape == 0:  # disk
        m = r <= half * 0.9
    elif shape == 1:  # square
        m = (np.abs(yy - c) <= half * 0.7) & (np.abs(xx - c) <= half * 0.7)
    elif shape == 2:  # ring
        m = (r <= half * 0.95) & (r >= half * 0.5)
    elif shape == 3:  # cross
        m = (np.abs(yy - c) <= half * 0.25) | (np.abs(xx - c) <= half * 0.25)
    elif shape == 4:  # horizontal bar
        m = np.abs(yy - c) <= half * 0.3
    else:  # diagonal
        m = np.abs(yy - xx) <= half * 0.35
    return m.astype(np.float32)


def active_glyphs(attribute_vector: np.ndarray) -> list[int]:
    return [int(i) for i in np.flatnonzero(attribute_vector > 0.5)]


def render_pair(
    spec: ClassSpec, instance_seed: int, noise_level: float, pair_id: int = 0
) -> ImageTextPair:
    """Render one image-text pair of ``spec``'s class.

    With ``noise_level == 0`` the output does not depend on ``instance_seed``.
    """
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError("noise_level must lie in [0, 1]")
    size = spec.image_size
    n_glyphs = len(spec.attribute_vector)
    table = glyph_table(n_glyphs)
    rng = np.random.default_rng([instance_seed, spec.class_id])
    cell = size // GRID
    gsize = max(3, cell - 2)
    jitter = int(round(2 * noise_level))

    img = np.zeros((size, size, 3), dtype=np.float32)
    glyphs = active_glyphs(spec.attribute_vector)
    for g in glyphs:
        shape, colour, pos = table[g]
        row, col = divmod(int(pos), GRID)
        y0 = row * cell + (cell - gsize) // 2
        x0 = col * cell + (cell - gsize) // 2
        if jitter:
            y0 += int(rng.integers(-jitter, jitter + 1))
            x0 += int(rng.integers(-jitter, jitter + 1))
        y0 = min(max(y0, 0), size - gsize)
        x0 = min(max(x0, 0), size - gsize)
        mask = _shape_mask(int(shape), gsize) * float(spec.attribute_vector[g])
        patch = mask[..., None] * PALETTE[int(colour)]
        region = img[y0 : y0 + gsize, x0 : x0 + gsize]
        np.maximum(region, patch, out=region)
    if noise_level > 0:
        img += rng.normal(0.0, 0.15 * noise_level, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)

    base = NUM_SPECIAL + spec.num_tasks
    caption = [domain_token(spec.task_id)]
    if spec.grammar == "compositional":
        for g in glyphs:
            caption += glyph_words(table[g], base)
    else:
        caption += [base + g for g in glyphs]
    first_filler = base + _attribute_words(spec.num_tasks, n_glyphs, spec.grammar)
    room = spec.max_seq_len - len(caption)
    n_fill = min(room, int(rng.binomial(spec.max_fillers, noise_level))) if noise_level > 0 else 0
    if n_fill > 0 and first_filler < spec.vocab_size:
        fillers = rng.integers(first_filler, spec.vocab_size, size=n_fill)
        for tok in fillers:
            caption.insert(int(rng.integers(1, len(caption) + 1)), int(tok))
    return ImageTextPair(
        image=img,
        caption=caption,
        class_id=spec.class_id,
        task_id=spec.task_id,
        pair_id=pair_id,
        instance_seed=instance_seed,
        noise_level=noise_level,
    )


# --------------------------------------------------------------------------
# generation


def zipf_counts(n_classes: int, exponent: float, total: int) -> np.ndarray:
    """Per-rank counts proportional to (rank+1)^-exponent, each >= 1, summing to total."""
    if total < n_classes:
        raise ValueError(f"{total} samples cannot cover {n_classes} classes")
    weights = (np.arange(1, n_classes + 1, dtype=np.float64)) ** (-exponent)
    spare = total - n_classes
    raw = weights / weights.sum() * spare
    counts = np.floor(raw).astype(np.int64)
    # largest remainder, ties to lower rank, keeps counts non-increasing
    rem = raw - counts
    order = np.lexsort((np.arange(n_classes), -rem))
    counts[order[: spare - counts.sum()]] += 1
    counts += 1
    counts = np.sort(counts)[::-1]
    return counts


def _assign_ranks(classes_per_task: Sequence[int]) -> list[list[int]]:
    """Deal global ranks round-robin over tasks so every task mixes head and tail."""
    remaining = list(classes_per_task)
    out: list[list[int]] = [[] for _ in classes_per_task]
    rank = 0
    while any(remaining):
        for t in range(len(remaining)):
            if remaining[t]:
                out[t].append(rank)
                remaining[t] -= 1
                rank += 1
    return out


def _class_attributes(cfg: StreamConfig, rng: np.random.Generator) -> list[np.ndarray]:
    n_glyphs = cfg.num_tasks * cfg.glyphs_per_task
    vecs: list[np.ndarray] = []
    for t, n_cls in enumerate(cfg.classes_per_task):
        block = np.arange(t * cfg.glyphs_per_task, (t + 1) * cfg.glyphs_per_task)
        combos = list(_combinations(cfg.glyphs_per_task, cfg.glyphs_per_class))
        picks = rng.choice(len(combos), size=n_cls, replace=False)
        for p in picks:
            v = np.zeros(n_glyphs, dtype=np.float32)
            chosen = block[list(combos[int(p)])]
            v[chosen] = rng.uniform(0.75, 1.0, size=len(chosen)).astype(np.float32)
            vecs.append(v)
    return vecs


def _combinations(n: int, k: int) -> Iterable[tuple[int, ...]]:
    from itertools import combinations

    return combinations(range(n), k)


def generate_task_stream(cfg: StreamConfig) -> TaskStream:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_classes = sum(cfg.classes_per_task)
    counts = zipf_counts(n_classes, cfg.zipf_exponent, cfg.samples_total)
    ranks = _assign_ranks(cfg.classes_per_task)
    attrs = _class_attributes(cfg, rng)

    classes: list[ClassSpec] = []
    cid = 0
    for t, task_ranks in enumerate(ranks):
        for r in task_ranks:
            classes.append(
                ClassSpec(
                    class_id=cid,
                    task_id=t,
                    attribute_vector=attrs[cid],
                    sample_count=int(counts[r]),
                    vocab_size=cfg.vocab_size,
                    max_seq_len=cfg.max_seq_len,
                    max_fillers=cfg.max_fillers,
                    image_size=cfg.image_size,
                    num_tasks=cfg.num_tasks,
                    grammar=cfg.grammar,
                )
            )
            cid += 1

    tasks = [TaskDataset(task_id=t) for t in range(cfg.num_tasks)]
    pair_id = 0
    for spec in classes:
        n = spec.sample_count
        plan = {
            "train": n,
            "test": 1 if n >= cfg.test_min_count else 0,
            "query": max(1, int(round(cfg.query_rate * n))),
            "gallery": max(1, int(round(cfg.gallery_rate * n))),
        }
        for split in SPLITS:
            for _ in range(plan[split]):
                seed = int(rng.integers(0, 2**31 - 1))
                pair = render_pair(spec, seed, cfg.noise_level, pair_id=pair_id)
                tasks[spec.task_id].split(split).append(pair)
                pair_id += 1
    return TaskStream(tasks=tasks, seed=cfg.seed, config=cfg, classes=classes)


# --------------------------------------------------------------------------
# manifest I/O


def write_manifest(stream: TaskStream, path: str | Path) -> None:
    """One JSON header line, then one record per pair in a fixed field order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": MANIFEST_VERSION,
        "seed": stream.seed,
        "num_tasks": len(stream.tasks),
        "config": asdict(stream.config) if stream.config is not None else None,
        "classes": [
            {
                "class_id": c.class_id,
                "task_id": c.task_id,
                "sample_count": c.sample_count,
                "attribute_vector": [float(x) for x in c.attribute_vector],
            }
            for c in stream.classes
        ],
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for task in stream.tasks:
            for split in SPLITS:
                for p in task.split(split):
                    rec = {
                        "pair_id": p.pair_id,
                        "task_id": p.task_id,
                        "class_id": p.class_id,
                        "split": split,
                        "caption": list(p.caption),
                        "gen": {"instance_seed": p.instance_seed, "noise_level": p.noise_level},
                    }
                    fh.write(json.dumps(rec) + "\n")


def load_manifest(path: str | Path) -> TaskStream:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line 1: malformed header ({exc.msg})") from exc
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: line 1: unsupported manifest version {header.get('version')!r}")

    cfg = StreamConfig(**header["config"]) if header.get("config") else None
    kw = {}
    if cfg is not None:
        kw = dict(
            vocab_size=cfg.vocab_size,
            max_seq_len=cfg.max_seq_len,
            max_fillers=cfg.max_fillers,
            image_size=cfg.image_size,
            num_tasks=cfg.num_tasks,
            grammar=cfg.grammar,
        )
    classes = [
        ClassSpec(
            class_id=c["class_id"],
            task_id=c["task_id"],
            attribute_vector=np.asarray(c["attribute_vector"], dtype=np.float32),
            sample_count=c["sample_count"],
            **kw,
        )
        for c in header.get("classes", [])
    ]
    by_id = {c.class_id: c for c in classes}
    tasks = [TaskDataset(task_id=t) for t in range(header.get("num_tasks", 0))]
    max_len = cfg.max_seq_len if cfg else None
    vocab = cfg.vocab_size if cfg else None

    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            split = rec["split"]
            pair_id = int(rec["pair_id"])
            task_id = int(rec["task_id"])
            class_id = int(rec["class_id"])
            caption = [int(x) for x in rec["caption"]]
            gen = rec["gen"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: line {lineno}: malformed record ({exc})") from exc
        if split not in SPLITS:
            raise ManifestError(f"{path}: line {lineno}: unknown split {split!r}")
        if max_len is not None and len(caption) > max_len:
            raise ManifestError(
                f"{path}: line {lineno}: caption length {len(caption)} exceeds max_seq_len {max_len}"
            )
        if vocab is not None and any(not 0 <= tok < vocab for tok in caption):
            raise ManifestError(f"{path}: line {lineno}: token id outside vocabulary")
        if class_id not in by_id or not 0 <= task_id < len(tasks):
            raise ManifestError(f"{path}: line {lineno}: unknown class or task id")
        spec = by_id[class_id]
        pair = render_pair(spec, int(gen["instance_seed"]), float(gen["noise_level"]), pair_id=pair_id)
        if pair.caption != caption:
            raise ManifestError(f"{path}: line {lineno}: caption does not match its generation spec")
        tasks[task_id].split(split).append(pair)

    for t in tasks:
        # test holdout is optional per class; the other splits always get >= 1 per class
        for split in ("train", "query", "gallery"):
            if t.class_ids and not t.split(split):
                raise ManifestError(f"{path}: task {t.task_id} has no {split!r} records")
    return TaskStream(tasks=tasks, seed=header.get("seed", 0), config=cfg, classes=classes)


def stream_summary(stream: TaskStream) -> dict:
    return {
        "tasks": len(stream.tasks),
        "classes": len(stream.classes),
        "splits": {s: [len(t.split(s)) for t in stream.tasks] for s in SPLITS},
    }
