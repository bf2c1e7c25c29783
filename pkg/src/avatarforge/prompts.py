"""Prompt composition from bundled style/attribute tables, plus the abstract
pose-guided image backend.

Positive prompts are three comma-joined parts: style text, view text, and
five sampled attribute categories. Negative prompts always carry the
lighting/blur negatives; Back views additionally suppress facial features.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .camera import normalize_yaw

FRONT = "Front"
SIDE = "Side"
BACK = "Back"

SEPARATOR = ", "


class SchemaError(ValueError):
    """Table file fails schema validation; message carries the field path."""


@dataclass(frozen=True)
class StyleEntry:
    name: str
    prompt: str
    source: str  # manual | generated


@dataclass(frozen=True)
class PromptTables:
    styles: dict[str, StyleEntry]
    attributes: dict[str, tuple[str, ...]]
    view_rules: dict

    @property
    def front_max_deg(self) -> float:
        return float(self.view_rules["front_max_deg"])

    @property
    def side_max_deg(self) -> float:
        return float(self.view_rules["side_max_deg"])


@dataclass(frozen=True)
class PromptBundle:
    style_text: str
    view_text: str
    attribute_names: tuple[str, ...]
    attribute_texts: tuple[str, ...]
    positive: str
    negative: str


def _expect(cond: bool, path: str, msg: str):
    if not cond:
        raise SchemaError(f"{path}: {msg}")


def parse_tables(obj) -> PromptTables:
    _expect(isinstance(obj, dict), "$", "top level must be an object")
    for key in ("styles", "attributes", "view_rules"):
        _expect(key in obj, f"$.{key}", "missing required key")

    styles: dict[str, StyleEntry] = {}
    _expect(isinstance(obj["styles"], list), "$.styles", "must be a list")
    for i, entry in enumerate(obj["styles"]):
        path = f"$.styles[{i}]"
        _expect(isinstance(entry, dict), path, "must be an object")
        for key in ("name", "prompt", "source"):
            _expect(key in entry, f"{path}.{key}", "missing required key")
            _expect(isinstance(entry[key], str), f"{path}.{key}", "must be a string")
        _expect(entry["prompt"] != "", f"{path}.prompt", "must be non-empty")
        _expect(entry["source"] in ("manual", "generated"),
                f"{path}.source", "must be 'manual' or 'generated'")
        _expect(entry["name"] not in styles, f"{path}.name",
                f"duplicate style name {entry['name']!r}")
        styles[entry["name"]] = StyleEntry(entry["name"], entry["prompt"],
                                           entry["source"])

    attributes: dict[str, tuple[str, ...]] = {}
    _expect(isinstance(obj["attributes"], dict), "$.attributes", "must be an object")
    for name, cats in obj["attributes"].items():
        path = f"$.attributes[{name!r}]"
        _expect(isinstance(cats, list), path, "must be a list")
        _expect(len(cats) >= 2, path, "needs at least 2 categories")
        for j, cat in enumerate(cats):
            _expect(isinstance(cat, str) and cat != "", f"{path}[{j}]",
                    "must be a non-empty string")
        attributes[name] = tuple(cats)

    rules = obj["view_rules"]
    _expect(isinstance(rules, dict), "$.view_rules", "must be an object")
    for key in ("front_max_deg", "side_max_deg", "view_prompts", "negatives"):
        _expect(key in rules, f"$.view_rules.{key}", "missing required key")
    for view in (FRONT, SIDE, BACK):
        _expect(view in rules["view_prompts"],
                f"$.view_rules.view_prompts.{view}", "missing view prompt")
    _expect("other" in rules["negatives"], "$.view_rules.negatives.other",
            "missing always-on negatives")
    _expect(0 < rules["front_max_deg"] < rules["side_max_deg"] <= 180.0,
            "$.view_rules", "need 0 < front_max_deg < side_max_deg <= 180")

    return PromptTables(styles, attributes, rules)


def load_tables(path: Optional[str] = None) -> PromptTables:
    """Load a table file, or the bundled default when path is None."""
    if path is None:
        text = (importlib.resources.files("avatarforge") / "data"
                / "prompt_tables.json").read_text()
    else:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(path)
        text = p.read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        raise SchemaError(f"$: not valid JSON ({err})") from err
    return parse_tables(obj)


def classify_view(yaw_deg: float, tables: Optional[PromptTables] = None) -> str:
    front_max = 45.0 if tables is None else tables.front_max_deg
    side_max = 120.0 if tables is None else tables.side_max_deg
    a = abs(normalize_yaw(yaw_deg))
    if a < front_max:
        return FRONT
    if a < side_max:
        return SIDE
    return BACK


def compose(style_name: str, pose, rng, tables: PromptTables) -> PromptBundle:
    """Sample 5 distinct attributes, one category each, and assemble the
    positive/negative prompt pair for the pose's view class."""
    if style_name not in tables.styles:
        raise KeyError(f"unknown style {style_name!r}")
    if len(tables.attributes) < 5:
        raise ValueError("attribute table needs at least 5 attributes")

    view = classify_view(pose.yaw_deg, tables)
    style_text = tables.styles[style_name].prompt
    view_text = tables.view_rules["view_prompts"][view]

    names = list(tables.attributes)
    picked = rng.choice(len(names), size=5, replace=False)
    att_names, att_texts = [], []
    for idx in picked:
        name = names[int(idx)]
        cats = tables.attributes[name]
        att_names.append(name)
        att_texts.append(cats[int(rng.integers(len(cats)))])

    positive = SEPARATOR.join([style_text, view_text, *att_texts])
    neg_parts = []
    view_neg = tables.view_rules["negatives"].get(view)
    if view_neg:
        neg_parts.append(view_neg)
    neg_parts.append(tables.view_rules["negatives"]["other"])
    negative = SEPARATOR.join(neg_parts)

    return PromptBundle(style_text, view_text, tuple(att_names),
                        tuple(att_texts), positive, negative)


@dataclass(frozen=True)
class RemoteConfig:
    base_url: str
    timeout_s: float = 30.0
    retries: int = 2


class RemoteBackend:
    """HTTP backend speaking the POST /generate wire protocol."""

    def __init__(self, config: RemoteConfig):
        self.config = config

    def generate(self, pose_image: np.ndarray, meta: dict,
                 bundle: PromptBundle, seed: int) -> np.ndarray:
        import requests

        from .imageio import png_b64_decode, png_b64_encode

        height, width = pose_image.shape[1], pose_image.shape[2]
        payload = {
            "prompt_pos": bundle.positive,
            "prompt_neg": bundle.negative,
            "pose_image_png_b64": png_b64_encode(pose_image),
            "width": width,
            "height": height,
            "seed": int(seed),
        }
        url = self.config.base_url.rstrip("/") + "/generate"
        last_err = None
        for _ in range(self.config.retries + 1):
            try:
                resp = requests.post(url, json=payload,
                                     timeout=self.config.timeout_s)
                resp.raise_for_status()
                body = resp.json()
                if "image_png_b64" not in body:
                    raise ValueError("response missing image_png_b64")
                image = png_b64_decode(body["image_png_b64"])
                if image.shape != (3, height, width):
                    raise ValueError(f"backend returned shape {image.shape}, "
                                     f"expected {(3, height, width)}")
                return image
            except (requests.RequestException, ValueError) as err:
                last_err = err
        raise RuntimeError(f"remote backend failed after "
                           f"{self.config.retries + 1} attempts: {last_err}")


def get_backend(name: str = "oracle", remote_config: Optional[RemoteConfig] = None):
    """Backend factory; the oracle backend lives with the procedural world."""
    if name == "oracle":
        from .oracle import OracleBackend
        return OracleBackend()
    if name == "remote":
        if remote_config is None:
            raise ValueError("remote backend needs a RemoteConfig")
        return RemoteBackend(remote_config)
    raise ValueError(f"unknown backend {name!r}")
