"""Ego-centric multi-channel VelocityMap observations.

Each frame has five channels: ego attention, human-driven vehicles,
autonomous vehicles, the mission vehicle, and the static road layout.
Relative longitudinal speed is embedded in pixel values through a clipped
logarithmic map, which compresses the useful 1-30 m/s band into [0.32, 1.0]
and de-emphasizes vehicles moving much faster or slower than the ego.

Rows run from the far end of the window (ahead of the ego) down to behind it;
columns span the road laterally on a fixed grid so the layout channel does
not depend on any vehicle state.
"""

from __future__ import annotations

import io
import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .road import RAMP_LANE, AV, HV, RoadLayout, WorldState

CHANNELS = ("ego", "hv", "av", "mission", "layout")
EGO, CH_HV, CH_AV, CH_MISSION, CH_LAYOUT = range(5)


@dataclass(frozen=True)
class PerceptionConfig:
    height: int = 128            # longitudinal pixels
    width: int = 32              # lateral pixels
    scale: float = 1.5625        # meters per pixel, longitudinal (window = 200 m)
    lat_scale: float = 0.5       # meters per pixel, lateral
    alpha: float = 1.0           # log-map gain, per (m/s)
    beta: float = 0.2            # log-map slope
    v0_threshold: float = 1.0    # speeds below this map to full intensity
    stack_depth: int = 10
    merge_mission: bool = False  # fold the mission channel into the kind channels

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.v0_threshold < 0:
            raise ValueError("v0_threshold must be non-negative")

    @property
    def window_length(self) -> float:
        return self.height * self.scale

    @property
    def n_channels(self) -> int:
        return 4 if self.merge_mission else 5

    @classmethod
    def reference(cls) -> "PerceptionConfig":
        return cls(height=512, width=64, scale=200.0 / 512.0)

    @classmethod
    def desk(cls) -> "PerceptionConfig":
        return cls()


def speed_to_pixel(
    v_rel: float, alpha: float = 1.0, beta: float = 0.2, v0_threshold: float = 1.0
) -> float:
    """Clipped logarithmic speed-to-intensity map.

    Below the threshold the step function zeroes the log term and the pixel
    saturates at 1.0; above it the intensity falls off logarithmically and is
    clipped to [0, 1].
    """
    mag = abs(v_rel)
    if mag < v0_threshold:
        return 1.0
    value = 1.0 - beta * math.log(alpha * mag)
    return min(1.0, max(0.0, value))


@dataclass(frozen=True)
class VelocityMapFrame:
    """One rasterized observation; ``pixels`` has shape (channels, H, W)."""

    pixels: np.ndarray
    scale: float
    lat_scale: float
    ego_id: int

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ValueError("pixels must be (channels, height, width)")


def _col_span(y: float, half_width: float, cfg: PerceptionConfig, y_min: float):
    c0 = int(math.floor((y - half_width - y_min) / cfg.lat_scale))
    c1 = int(math.ceil((y + half_width - y_min) / cfg.lat_scale))
    return max(0, c0), max(0, min(cfg.width, c1))


def _row_span(l_lo: float, l_hi: float, l_ego: float, cfg: PerceptionConfig):
    """Map a longitudinal interval to raster rows (row 0 = farthest ahead)."""
    half = cfg.window_length / 2.0
    r0 = int(math.floor((l_ego + half - l_hi) / cfg.scale))
    r1 = int(math.ceil((l_ego + half - l_lo) / cfg.scale))
    return max(0, r0), max(0, min(cfg.height, r1))


def rasterize(
    world: WorldState, ego_id: int, cfg: PerceptionConfig | None = None
) -> VelocityMapFrame:
    """Paint the ego-centered window into a multi-channel frame.

    Vehicles outside the window are absent; everything inside is drawn as a
    rectangle in its kind's channel with intensity speed_to_pixel(v - v_ego).
    The mission vehicle additionally lands in the mission channel.
    """
    cfg = cfg or PerceptionConfig()
    layout = world.layout
    ego = world.vehicle(ego_id)
    if ego.crashed:
        raise ValueError("cannot rasterize for a crashed ego")
    y_min = (RAMP_LANE - 0.5) * layout.lane_width  # bottom edge of the ramp lane

    pixels = np.zeros((5, cfg.height, cfg.width), dtype=np.float32)
    half = cfg.window_length / 2.0

    # layout channel: highway lanes run the whole window; the ramp only where drivable
    for lane in range(layout.n_lanes):
        y = layout.lane_y(lane)
        c0, c1 = _col_span(y, layout.lane_width / 2.0, cfg, y_min)
        pixels[CH_LAYOUT, :, c0:c1] = 1.0
    ramp_y = layout.lane_y(RAMP_LANE)
    c0, c1 = _col_span(ramp_y, layout.lane_width / 2.0, cfg, y_min)
    if layout.ramp_kind == "merge":
        ramp_lo = layout.attach_start - layout.ramp_approach
        ramp_hi = layout.attach_end
    else:
        ramp_lo = layout.attach_start
        ramp_hi = layout.total_length
    r0, r1 = _row_span(ramp_lo, ramp_hi, ego.l, cfg)
    pixels[CH_LAYOUT, r0:r1, c0:c1] = 1.0

    half_w = 1.0  # painted vehicle half-width in meters
    for veh in world.vehicles:
        lo, hi = veh.rear(), veh.front()
        if hi < ego.l - half or lo > ego.l + half:
            continue
        r0, r1 = _row_span(lo, hi, ego.l, cfg)
        c0, c1 = _col_span(veh.y(layout), half_w, cfg, y_min)
        if r0 >= r1 or c0 >= c1:
            continue
        if veh.id == ego_id:
            pixels[EGO, r0:r1, c0:c1] = 1.0
            continue
        value = speed_to_pixel(
            veh.v - ego.v, cfg.alpha, cfg.beta, cfg.v0_threshold
        )
        channel = CH_AV if veh.kind == AV else CH_HV
        pixels[channel, r0:r1, c0:c1] = np.maximum(
            pixels[channel, r0:r1, c0:c1], value
        )
        if veh.mission != "none":
            pixels[CH_MISSION, r0:r1, c0:c1] = np.maximum(
                pixels[CH_MISSION, r0:r1, c0:c1], value
            )

    if cfg.merge_mission:
        merged = np.zeros((4, cfg.height, cfg.width), dtype=np.float32)
        merged[0] = pixels[EGO]
        merged[1] = np.maximum(pixels[CH_HV], pixels[CH_MISSION])
        merged[2] = pixels[CH_AV]
        merged[3] = pixels[CH_LAYOUT]
        pixels = merged

    return VelocityMapFrame(
        pixels=pixels, scale=cfg.scale, lat_scale=cfg.lat_scale, ego_id=ego_id
    )


class ObservationStack:
    """Ring of the last H frames; missing history repeats the oldest frame."""

    def __init__(self, depth: int = 10):
        if depth < 1:
            raise ValueError("stack depth must be >= 1")
        self.depth = depth
        self._frames: deque[VelocityMapFrame] = deque(maxlen=depth)

    def reset(self, frame: VelocityMapFrame) -> None:
        self._frames.clear()
        for _ in range(self.depth):
            self._frames.append(frame)

    def push(self, frame: VelocityMapFrame) -> None:
        if not self._frames:
            self.reset(frame)
            return
        if frame.pixels.shape != self._frames[-1].pixels.shape:
            raise ValueError("frame shape does not match the stack")
        self._frames.append(frame)

    def __len__(self) -> int:
        return len(self._frames)

    @property
    def frames(self) -> list[VelocityMapFrame]:
        return list(self._frames)

    def tensor(self) -> np.ndarray:
        """(H, channels, height, width), newest frame last."""
        if not self._frames:
            raise ValueError("stack is empty")
        return np.stack([f.pixels for f in self._frames], axis=0)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.save(buf, self.tensor())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes, scale: float, lat_scale: float, ego_id: int):
        tensor = np.load(io.BytesIO(raw))
        stack = cls(depth=tensor.shape[0])
        for plane in tensor:
            stack.push(
                VelocityMapFrame(
                    pixels=plane, scale=scale, lat_scale=lat_scale, ego_id=ego_id
                )
            )
        return stack


def push_frame(stack: ObservationStack, frame: VelocityMapFrame) -> ObservationStack:
    """Functional wrapper over ObservationStack.push (oldest frame evicted)."""
    stack.push(frame)
    return stack


def dump_frame(
    frame: VelocityMapFrame,
    cfg: PerceptionConfig,
    basepath: str,
    config_hash: str = "",
    seed: int | None = None,
) -> list[str]:
    """Debug dump: one PGM-style ASCII grid per channel plus a JSON sidecar."""
    written = []
    names = CHANNELS if frame.pixels.shape[0] == 5 else ("ego", "hv", "av", "layout")
    for idx, name in enumerate(names):
        path = f"{basepath}.{name}.pgm"
        plane = (frame.pixels[idx] * 255).astype(np.uint8)
        with open(path, "w") as f:
            f.write(f"P2\n{plane.shape[1]} {plane.shape[0]}\n255\n")
            for row in plane:
                f.write(" ".join(str(int(p)) for p in row) + "\n")
        written.append(path)
    sidecar = f"{basepath}.json"
    with open(sidecar, "w") as f:
        json.dump(
            {
                "scale": frame.scale,
                "lat_scale": frame.lat_scale,
                "alpha": cfg.alpha,
                "beta": cfg.beta,
                "v0_threshold": cfg.v0_threshold,
                "ego_id": frame.ego_id,
                "channels": list(names),
                "config_hash": config_hash,
                "seed": seed,
            },
            f,
            sort_keys=True,
            indent=2,
        )
    written.append(sidecar)
    return written
