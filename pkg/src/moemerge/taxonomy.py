"""Structural classification of tensor names and subset resolution.

Tensor names are matched against an ordered rule list (first match wins,
no match means ``OTHER``). Patterns use one small syntax, also accepted in
recipe files:

* ``{layer}`` / ``{expert}``  capture a decimal integer index
* ``{proj}``                  captures one dot-free name segment; a trailing
  ``_proj`` is stripped from the stored projection label (``down_proj`` ->
  ``down``)
* ``*``                       matches within a single segment (no dots)
* ``**``                      matches across segments
* anything else is literal; matches are anchored to the whole name

The built-in default scheme follows DeepSeek-V3-style names. Free-standing
per-layer norms (``input_layernorm``, ``post_attention_layernorm``) classify
as ``EMBEDDING_NORM_HEAD`` (which never carries a layer index), while norms
inside the attention block (``self_attn.q_a_layernorm``) count as attention;
the router gate (``mlp.gate``) and the shared-expert gate projection
(``mlp.shared_experts.gate_proj``) are deliberately distinct categories.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable

from .errors import RecipeError

if TYPE_CHECKING:
    from .safetensors_io import CheckpointIndex


class TensorGroup(enum.Enum):
    ATTENTION = "attention"
    ROUTED_EXPERT_MLP = "routed_expert_mlp"
    SHARED_EXPERT_MLP = "shared_expert_mlp"
    EXPERT_GATE = "expert_gate"
    DENSE_MLP = "dense_mlp"
    EMBEDDING_NORM_HEAD = "embedding_norm_head"
    OTHER = "other"

    def __str__(self) -> str:  # noqa: D105
        return self.value


# Presentation / census ordering of groups.
GROUP_ORDER = {g: i for i, g in enumerate(TensorGroup)}

# Groups whose categories carry a layer index.
_LAYERED = frozenset(
    {
        TensorGroup.ATTENTION,
        TensorGroup.ROUTED_EXPERT_MLP,
        TensorGroup.SHARED_EXPERT_MLP,
        TensorGroup.EXPERT_GATE,
        TensorGroup.DENSE_MLP,
    }
)


@dataclass(frozen=True)
class TensorCategory:
    group: TensorGroup
    layer: int | None = None
    expert: int | None = None
    projection: str | None = None

    def label(self) -> str:
        """Subgroup label used in report columns: group plus projection."""
        if self.projection:
            return f"{self.group.value}.{self.projection}"
        return self.group.value


_TOKEN = re.compile(r"\{layer\}|\{expert\}|\{proj\}|\*\*|\*")


def _compile_pattern(pattern: str) -> re.Pattern[str]:
    out: list[str] = []
    pos = 0
    for m in _TOKEN.finditer(pattern):
        out.append(re.escape(pattern[pos : m.start()]))
        tok = m.group()
        if tok == "{layer}":
            out.append(r"(?P<layer>\d+)")
        elif tok == "{expert}":
            out.append(r"(?P<expert>\d+)")
        elif tok == "{proj}":
            out.append(r"(?P<proj>[^.]+)")
        elif tok == "**":
            out.append(r".*")
        else:  # "*"
            out.append(r"[^.]*")
        pos = m.end()
    out.append(re.escape(pattern[pos:]))
    try:
        return re.compile("".join(out) + r"\Z")
    except re.error as exc:  # pragma: no cover - escape() keeps this unreachable
        raise RecipeError(f"bad pattern {pattern!r}: {exc}") from exc


@dataclass(frozen=True)
class SchemeRule:
    pattern: str
    group: TensorGroup
    _regex: re.Pattern[str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_regex", _compile_pattern(self.pattern))


@dataclass(frozen=True)
class NamingScheme:
    """Ordered classification rules; first match wins."""

    rules: tuple[SchemeRule, ...]

    @classmethod
    def from_rules(cls, rules: Iterable[tuple[str, TensorGroup | str]]) -> "NamingScheme":
        compiled = []
        for pattern, group in rules:
            if not isinstance(group, TensorGroup):
                try:
                    group = TensorGroup(group)
                except ValueError:
                    raise RecipeError(f"unknown tensor group {group!r}") from None
            compiled.append(SchemeRule(pattern, group))
        return cls(tuple(compiled))

    def to_json_obj(self) -> list[dict[str, str]]:
        return [{"pattern": r.pattern, "group": r.group.value} for r in self.rules]

    @classmethod
    def from_json_obj(cls, obj: object) -> "NamingScheme":
        if not isinstance(obj, list):
            raise RecipeError("naming scheme must be a list of {pattern, group} rules")
        rules = []
        for i, entry in enumerate(obj):
            if not isinstance(entry, dict) or set(entry) != {"pattern", "group"}:
                raise RecipeError(
                    f"scheme rule {i} must have exactly the keys 'pattern' and 'group'"
                )
            rules.append((entry["pattern"], entry["group"]))
        return cls.from_rules(rules)


DEFAULT_SCHEME = NamingScheme.from_rules(
    [
        ("model.embed_tokens.weight", TensorGroup.EMBEDDING_NORM_HEAD),
        ("model.norm.weight", TensorGroup.EMBEDDING_NORM_HEAD),
        ("lm_head.weight", TensorGroup.EMBEDDING_NORM_HEAD),
        ("model.layers.*.input_layernorm.weight", TensorGroup.EMBEDDING_NORM_HEAD),
        ("model.layers.*.post_attention_layernorm.weight", TensorGroup.EMBEDDING_NORM_HEAD),
        ("model.layers.{layer}.self_attn.{proj}.weight", TensorGroup.ATTENTION),
        ("model.layers.{layer}.self_attn.**", TensorGroup.ATTENTION),
        ("model.layers.{layer}.mlp.gate.weight", TensorGroup.EXPERT_GATE),
        ("model.layers.{layer}.mlp.gate.e_score_correction_bias", TensorGroup.EXPERT_GATE),
        ("model.layers.{layer}.mlp.experts.{expert}.{proj}.weight", TensorGroup.ROUTED_EXPERT_MLP),
        ("model.layers.{layer}.mlp.shared_experts.{proj}.weight", TensorGroup.SHARED_EXPERT_MLP),
        ("model.layers.{layer}.mlp.shared_experts.*.{proj}.weight", TensorGroup.SHARED_EXPERT_MLP),
        ("model.layers.{layer}.mlp.{proj}.weight", TensorGroup.DENSE_MLP),
    ]
)


def classify(name: str, scheme: NamingScheme = DEFAULT_SCHEME) -> TensorCategory:
    """Deterministic, total classification of one tensor name."""
    for rule in scheme.rules:
        m = rule._regex.match(name)
        if m is None:
            continue
        groups = m.groupdict()
        layer = int(groups["layer"]) if groups.get("layer") is not None else None
        expert = int(groups["expert"]) if groups.get("expert") is not None else None
        proj = groups.get("proj")
        if proj is not None and proj.endswith("_proj"):
            proj = proj[: -len("_proj")]
        if rule.group not in _LAYERED:
            layer = None
        if rule.group is not TensorGroup.ROUTED_EXPERT_MLP:
            expert = None
        return TensorCategory(rule.group, layer=layer, expert=expert, projection=proj)
    return TensorCategory(TensorGroup.OTHER)


class SubsetMode(enum.Enum):
    FULL = "full"
    EXPERTS_ONLY = "experts-only"
    CUSTOM = "custom"


@dataclass(frozen=True)
class SubsetSpec:
    """Which tensors are candidates for merging.

    FULL selects everything; EXPERTS_ONLY selects exactly the routed-expert
    MLP tensors (router gates excluded); CUSTOM selects by group membership,
    optionally overridden by ordered (pattern, include) name rules — first
    matching pattern wins, unmatched names fall back to group membership,
    and unclassified (OTHER) tensors default to excluded.
    """

    mode: SubsetMode = SubsetMode.FULL
    custom_groups: frozenset[TensorGroup] = frozenset()
    custom_name_patterns: tuple[tuple[str, bool], ...] = ()

    def __post_init__(self):
        compiled = tuple(
            (_compile_pattern(p), include) for p, include in self.custom_name_patterns
        )
        object.__setattr__(self, "_compiled_patterns", compiled)


FULL_SUBSET = SubsetSpec(SubsetMode.FULL)
EXPERTS_ONLY_SUBSET = SubsetSpec(SubsetMode.EXPERTS_ONLY)


def in_subset(
    category: TensorCategory, spec: SubsetSpec, name: str | None = None
) -> bool:
    """Membership test for the merge-candidate subset."""
    if spec.mode is SubsetMode.FULL:
        return True
    if spec.mode is SubsetMode.EXPERTS_ONLY:
        return category.group is TensorGroup.ROUTED_EXPERT_MLP
    if name is not None:
        for regex, include in spec._compiled_patterns:  # type: ignore[attr-defined]
            if regex.match(name):
                return include
    if category.group is TensorGroup.OTHER:
        return False
    return category.group in spec.custom_groups


def subset_to_json_obj(spec: SubsetSpec) -> str | dict:
    """Recipe-file form: "full", "experts-only", or a custom object."""
    if spec.mode is SubsetMode.FULL:
        return "full"
    if spec.mode is SubsetMode.EXPERTS_ONLY:
        return "experts-only"
    obj: dict = {
        "groups": sorted(g.value for g in spec.custom_groups),
    }
    if spec.custom_name_patterns:
        obj["patterns"] = [
            {"pattern": p, "include": inc} for p, inc in spec.custom_name_patterns
        ]
    return obj


def subset_from_json_obj(obj: object) -> SubsetSpec:
    if isinstance(obj, str):
        if obj == "full":
            return FULL_SUBSET
        if obj == "experts-only":
            return EXPERTS_ONLY_SUBSET
        raise RecipeError(
            f"unknown subset {obj!r}: expected 'full', 'experts-only', or an object"
        )
    if not isinstance(obj, dict):
        raise RecipeError("subset must be a string or an object")
    unknown = set(obj) - {"groups", "patterns"}
    if unknown:
        raise RecipeError(f"unknown subset keys {sorted(unknown)}")
    groups = set()
    for g in obj.get("groups", []):
        try:
            groups.add(TensorGroup(g))
        except ValueError:
            raise RecipeError(f"unknown tensor group {g!r}") from None
    patterns = []
    for i, entry in enumerate(obj.get("patterns", [])):
        if (
            not isinstance(entry, dict)
            or set(entry) != {"pattern", "include"}
            or not isinstance(entry["pattern"], str)
            or not isinstance(entry["include"], bool)
        ):
            raise RecipeError(
                f"subset pattern {i} must be {{'pattern': str, 'include': bool}}"
            )
        patterns.append((entry["pattern"], entry["include"]))
    return SubsetSpec(
        SubsetMode.CUSTOM,
        custom_groups=frozenset(groups),
        custom_name_patterns=tuple(patterns),
    )


@dataclass(frozen=True)
class CensusRow:
    group: TensorGroup
    layer: int | None
    tensors: int
    params: int


def census(index: "CheckpointIndex", scheme: NamingScheme = DEFAULT_SCHEME) -> list[CensusRow]:
    """Tensor and parameter counts per (group, layer).

    Rows are ordered by layer (layerless rows first), then by group; totals
    over the rows equal the checkpoint's tensor count exactly.
    """
    counts: dict[tuple[int, int | None], list[int]] = {}
    for name, info in index.tensors.items():
        cat = classify(name, scheme)
        key = (GROUP_ORDER[cat.group], cat.layer)
        slot = counts.setdefault(key, [0, 0])
        slot[0] += 1
        slot[1] += info.numel
    rows = []
    for (gidx, layer), (n, params) in sorted(
        counts.items(), key=lambda kv: (-1 if kv[0][1] is None else kv[0][1], kv[0][0])
    ):
        rows.append(CensusRow(list(TensorGroup)[gidx], layer, n, params))
    return rows
