"""Classical-vision oracle: finds and classifies shapes in a rendered or generated image."""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

MIN_AREA = 8
FOREGROUND_THRESHOLD = 0.2  # in [0, 1] colour units, max over channels


@dataclass
class Detection:
    shape: str
    mean_color: tuple
    mask: np.ndarray
    circularity: float = 0.0
    corners: int = 0
    holes: int = 0
    extent: float = 0.0

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def foreground_mask(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0
    bg = np.median(rgb.reshape(-1, 3), axis=0)
    diff = np.abs(rgb - bg).max(axis=-1)
    return diff > FOREGROUND_THRESHOLD, rgb, diff


def shape_features(mask: np.ndarray) -> dict:
    filled = ndimage.binary_fill_holes(mask)
    hole_px = filled & ~mask
    holes = 0
    if hole_px.any():
        _, n_holes = ndimage.label(hole_px)
        holes = n_holes
    # upscale so contours and perimeters are less dominated by pixel steps
    big = cv2.resize(filled.astype(np.uint8) * 255, None, fx=4, fy=4, interpolation=cv2.INTER_LINEAR)
    big = (big > 127).astype(np.uint8)
    contours, _ = cv2.findContours(big, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    if not contours:
        return dict(circularity=0.0, corners=0, holes=holes, extent=0.0)
    cnt = max(contours, key=cv2.contourArea)
    area = cv2.contourArea(cnt)
    perim = cv2.arcLength(cnt, True)
    circularity = 4 * np.pi * area / (perim * perim) if perim > 0 else 0.0
    approx = cv2.approxPolyDP(cnt, 0.04 * perim, True)
    x, y, w, h = cv2.boundingRect(cnt)
    extent = area / float(w * h) if w * h else 0.0
    return dict(circularity=float(circularity), corners=int(len(approx)), holes=holes, extent=float(extent))


def classify(features: dict) -> str:
    if features["holes"] >= 1:
        return "ring"
    ext, circ, corners = features["extent"], features["circularity"], features["corners"]
    if ext < 0.64:
        return "triangle"
    if ext > 0.88:
        return "square"
    if corners <= 3 and circ < 0.7:
        return "triangle"
    if corners == 4 and circ < 0.82:
        return "square"
    return "disc"


def detect_concepts(image: np.ndarray, min_area: int = MIN_AREA) -> list[Detection]:
    """Background subtraction, 8-connected components, per-component shape and mean colour."""
    fg, rgb, diff = foreground_mask(image)
    if not fg.any():
        return []
    n, labels = cv2.connectedComponents(fg.astype(np.uint8), connectivity=8)
    out = []
    for lab in range(1, n):
        comp = labels == lab
        # keep pixels at least half as far from the background as the component's typical interior
        contrast = np.percentile(diff[comp], 90)
        comp &= diff > 0.5 * contrast
        if comp.sum() < min_area:
            continue
        feats = shape_features(comp)
        core = ndimage.binary_erosion(comp)
        pick = core if core.sum() >= 4 else comp
        color = tuple(float(c) for c in rgb[pick].mean(axis=0))
        out.append(Detection(shape=classify(feats), mean_color=color, mask=comp, **feats))
    return out


def set_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0
