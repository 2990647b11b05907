"""Event-camera data model, synthetic scene simulator, and voxelization.

Scenes are moving rectangles and discs over a textured background. Events
come from a standard brightness-change model: a pixel whose log-intensity
change between consecutive frames exceeds the contrast threshold emits
floor(|dL|/threshold) events of the matching polarity, with timestamps
spread uniformly inside the inter-frame interval.
"""

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

# intensity model constants
SHADE_NOISE_AMP = 0.02   # amplitude of the fixed per-pixel texture noise
LOG_OFFSET = 0.01        # added before taking logs, keeps dark pixels finite
STEP_US = 1000           # microseconds between consecutive rendered frames

EVENT_MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sIIQ")
_RECORD_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("p", "u1")])


class InvalidSpecError(ValueError):
    """A scene specification violates its invariants."""


class InsufficientEventsError(ValueError):
    """A stream is too short for the requested voxelization."""

    def __init__(self, required, available):
        super().__init__(
            f"voxelization needs {required} events, stream has {available}"
        )
        self.required = required
        self.available = available


class EventFormatError(ValueError):
    """An event file is malformed; ``offset`` is the failing byte offset."""

    def __init__(self, message, offset, record=None):
        detail = f"{message} (byte offset {offset}"
        if record is not None:
            detail += f", record {record}"
        detail += ")"
        super().__init__(detail)
        self.offset = offset
        self.record = record


@dataclass(frozen=True)
class Event:
    """One sensor event: column x, row y, timestamp t (microseconds), polarity p."""

    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Time-ordered events from one sensor of size width x height.

    Coordinates, timestamps and polarities are stored as parallel arrays;
    timestamps must be non-decreasing and all fields in range.
    """

    width: int
    height: int
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        n = len(self.x)
        if not (len(self.y) == len(self.t) == len(self.p) == n):
            raise ValueError("event field arrays must have equal length")
        if n:
            if self.x.min() < 0 or self.x.max() >= self.width:
                raise ValueError("event x coordinate out of bounds")
            if self.y.min() < 0 or self.y.max() >= self.height:
                raise ValueError("event y coordinate out of bounds")
            if self.t.min() < 0:
                raise ValueError("event timestamps must be non-negative")
            if np.any(np.diff(self.t) < 0):
                raise ValueError("event timestamps must be non-decreasing")
            if not np.isin(self.p, (0, 1)).all():
                raise ValueError("polarity must be 0 or 1")

    def __len__(self):
        return len(self.x)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )

    @classmethod
    def from_events(cls, width, height, events):
        events = list(events)
        return cls(
            width=width,
            height=height,
            x=np.array([e.x for e in events], dtype=np.int64),
            y=np.array([e.y for e in events], dtype=np.int64),
            t=np.array([e.t for e in events], dtype=np.int64),
            p=np.array([e.p for e in events], dtype=np.int64),
        )

    def events(self):
        """Materialize as a list of Event tuples (small streams only)."""
        return [
            Event(int(xi), int(yi), int(ti), int(pi))
            for xi, yi, ti, pi in zip(self.x, self.y, self.t, self.p)
        ]


@dataclass
class VoxelTensor:
    """Stack of signed event-accumulation frames, one channel per window."""

    channels: int
    height: int
    width: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.channels, self.height, self.width):
            raise ValueError("voxel data shape does not match declared dims")


@dataclass
class ObjectSpec:
    """One moving object. Rectangles use (x, y) as the top-left corner and
    (w, h) extents; discs use (x, y) as the center and radius r. Velocity is
    pixels per simulation step."""

    class_id: int
    kind: str  # "rect" or "disc"
    x: float
    y: float
    w: float = 0.0
    h: float = 0.0
    r: float = 0.0
    vx: float = 0.0
    vy: float = 0.0


@dataclass
class SceneSpec:
    """Synthetic scene: canvas size, class count, objects drawn back to front."""

    width: int
    height: int
    num_classes: int
    objects: list = field(default_factory=list)
    background_class: int = 0
    seed: int = 0

    def validate(self):
        if not 1 <= self.num_classes <= 32:
            raise InvalidSpecError("num_classes must lie in [1, 32]")
        if not 0 <= self.background_class < self.num_classes:
            raise InvalidSpecError("background class id out of range")
        for obj in self.objects:
            if not 0 <= obj.class_id < self.num_classes:
                raise InvalidSpecError("object class id out of range")
            if obj.kind not in ("rect", "disc"):
                raise InvalidSpecError(f"unknown object kind {obj.kind!r}")


def class_shade(class_id, num_classes):
    """Fixed intensity assigned to a class, strictly inside (0, 1)."""
    return (class_id + 1.0) / (num_classes + 1.0)


def render_scene(spec: SceneSpec, step: int):
    """Rasterize the scene at ``step`` into an intensity image and label map.

    Objects are offset by velocity*step and drawn in list order, so later
    objects occlude earlier ones; anything outside the canvas is clipped.
    The image is the per-class shade plus a texture-noise field fixed by
    spec.seed, clipped to [0, 1].
    """
    spec.validate()
    if step < 0:
        raise ValueError("step must be non-negative")
    h, w = spec.height, spec.width
    labels = np.full((h, w), spec.background_class, dtype=np.int64)
    # pixel-center sampling: pixel (row, col) samples the point (col+.5, row+.5)
    cx = np.arange(w, dtype=np.float64) + 0.5
    cy = np.arange(h, dtype=np.float64) + 0.5
    px, py = np.meshgrid(cx, cy)
    for obj in spec.objects:
        ox = obj.x + obj.vx * step
        oy = obj.y + obj.vy * step
        if obj.kind == "rect":
            mask = (px >= ox) & (px < ox + obj.w) & (py >= oy) & (py < oy + obj.h)
        else:
            mask = (px - ox) ** 2 + (py - oy) ** 2 <= obj.r**2
        labels[mask] = obj.class_id
    shades = class_shade(np.arange(spec.num_classes), spec.num_classes)
    image = shades[labels]
    noise_rng = np.random.default_rng(spec.seed)
    noise = noise_rng.uniform(-SHADE_NOISE_AMP, SHADE_NOISE_AMP, size=(h, w))
    image = np.clip(image + noise, 0.0, 1.0)
    return image, labels


def events_from_frames(frames, threshold, start_t=0, step_us=STEP_US):
    """Emit events from consecutive intensity frames via the log-threshold model.

    Each pixel fires floor(|dlog|/threshold) events per frame pair, polarity
    matching the sign of the change, timestamps evenly spaced strictly inside
    the interval. Returns (x, y, t, p) int64 arrays sorted by t.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    xs, ys, ts, ps = [], [], [], []
    prev = np.log(np.asarray(frames[0], dtype=np.float64) + LOG_OFFSET)
    for k in range(1, len(frames)):
        cur = np.log(np.asarray(frames[k], dtype=np.float64) + LOG_OFFSET)
        diff = cur - prev
        prev = cur
        counts = np.floor(np.abs(diff) / threshold).astype(np.int64)
        yy, xx = np.nonzero(counts)
        if yy.size == 0:
            continue
        n = counts[yy, xx]
        pol = (diff[yy, xx] > 0).astype(np.int64)
        reps = np.repeat(np.arange(yy.size), n)
        # j-th of n events sits at fraction (j+1)/(n+1) of the interval
        j = np.concatenate([np.arange(c) for c in n])
        frac = (j + 1.0) / (n[reps] + 1.0)
        t0 = start_t + (k - 1) * step_us
        ts.append((t0 + frac * step_us).astype(np.int64))
        xs.append(xx[reps])
        ys.append(yy[reps])
        ps.append(pol[reps])
    if not xs:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy(), empty.copy()
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    t = np.concatenate(ts)
    p = np.concatenate(ps)
    order = np.argsort(t, kind="stable")
    return x[order], y[order], t[order], p[order]


def simulate_events(spec: SceneSpec, steps: int, threshold: float) -> EventStream:
    """Render ``steps`` frames of the scene and convert them to an event stream."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    spec.validate()
    frames = [render_scene(spec, k)[0] for k in range(steps)]
    x, y, t, p = events_from_frames(frames, threshold)
    return EventStream(width=spec.width, height=spec.height, x=x, y=y, t=t, p=p)


def voxelize(stream: EventStream, events_per_grid: int, num_grids: int) -> VoxelTensor:
    """Accumulate the newest events_per_grid*num_grids events into signed frames.

    The consumed suffix is split, in time order, into num_grids consecutive
    windows; each event adds +1 (positive polarity) or -1 at its (y, x) cell
    of the window's channel. Older surplus events are dropped.
    """
    if events_per_grid < 1 or num_grids < 1:
        raise ValueError("events_per_grid and num_grids must be positive")
    needed = events_per_grid * num_grids
    if len(stream) < needed:
        raise InsufficientEventsError(needed, len(stream))
    start = len(stream) - needed
    x = stream.x[start:]
    y = stream.y[start:]
    p = stream.p[start:]
    channel = np.arange(needed) // events_per_grid
    data = np.zeros((num_grids, stream.height, stream.width), dtype=np.float64)
    np.add.at(data, (channel, y, x), np.where(p == 1, 1.0, -1.0))
    return VoxelTensor(
        channels=num_grids, height=stream.height, width=stream.width, data=data
    )


def write_events(stream: EventStream, path):
    """Write a stream in the binary event format."""
    if stream.width >= 2**16 or stream.height >= 2**16:
        raise ValueError("sensor dimensions exceed the u16 record format")
    records = np.empty(len(stream), dtype=_RECORD_DTYPE)
    records["x"] = stream.x
    records["y"] = stream.y
    records["t"] = stream.t
    records["p"] = stream.p
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EVENT_MAGIC, stream.width, stream.height, len(stream)))
        fh.write(records.tobytes())


def read_events(path) -> EventStream:
    """Read the binary event format, validating structure and invariants."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise EventFormatError("truncated header", offset=len(blob))
    magic, width, height, count = _HEADER.unpack_from(blob, 0)
    if magic != EVENT_MAGIC:
        raise EventFormatError("bad magic", offset=0)
    body = blob[_HEADER.size :]
    expected = count * _RECORD_DTYPE.itemsize
    if len(body) < expected:
        whole = len(body) // _RECORD_DTYPE.itemsize
        raise EventFormatError(
            "truncated record",
            offset=_HEADER.size + whole * _RECORD_DTYPE.itemsize,
            record=whole,
        )
    records = np.frombuffer(body[:expected], dtype=_RECORD_DTYPE)
    x = records["x"].astype(np.int64)
    y = records["y"].astype(np.int64)
    t = records["t"].astype(np.int64)
    p = records["p"].astype(np.int64)
    bad = np.flatnonzero((x >= width) | (y >= height))
    if bad.size:
        idx = int(bad[0])
        raise EventFormatError(
            "coordinate out of bounds",
            offset=_HEADER.size + idx * _RECORD_DTYPE.itemsize,
            record=idx,
        )
    bad = np.flatnonzero(p > 1)
    if bad.size:
        idx = int(bad[0])
        raise EventFormatError(
            "polarity must be 0 or 1",
            offset=_HEADER.size + idx * _RECORD_DTYPE.itemsize,
            record=idx,
        )
    if count > 1:
        drops = np.flatnonzero(np.diff(t) < 0)
        if drops.size:
            idx = int(drops[0]) + 1
            raise EventFormatError(
                "decreasing timestamp",
                offset=_HEADER.size + idx * _RECORD_DTYPE.itemsize,
                record=idx,
            )
    return EventStream(width=width, height=height, x=x, y=y, t=t, p=p)


def write_events_csv(stream: EventStream, path):
    """Write a stream as CSV with header x,y,t,p."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "t", "p"])
        for xi, yi, ti, pi in zip(stream.x, stream.y, stream.t, stream.p):
            writer.writerow([int(xi), int(yi), int(ti), int(pi)])


def read_events_csv(path, width, height) -> EventStream:
    """Read the CSV alternative format; sensor size is not stored in the file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EventFormatError("empty file", offset=0) from None
        if [c.strip() for c in header] != ["x", "y", "t", "p"]:
            raise EventFormatError("bad csv header", offset=0)
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([int(v) for v in row])
            except ValueError:
                raise EventFormatError(
                    f"non-integer field on line {line_no}", offset=line_no
                ) from None
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    try:
        return EventStream(
            width=width, height=height, x=arr[:, 0], y=arr[:, 1], t=arr[:, 2], p=arr[:, 3]
        )
    except ValueError as exc:
        raise EventFormatError(str(exc), offset=0) from None
