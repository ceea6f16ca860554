"""Parse nested composition-tree specs (plain dicts from JSON) into CompositionTree objects."""

from __future__ import annotations

import re
from typing import Any, Mapping

from services.compose import (
    CompositionTree,
    conditional_product,
    guidance,
    guidance_term_explicit,
    guidance_term_implicit,
    leaf,
    mixture,
    negation,
    product,
    temper,
)
from services.errors import ConfigError, to_float, to_int

OPS = (
    "product",
    "mixture",
    "negation",
    "temper",
    "guidance",
    "conditional_product",
    "classifier",
    "difference",
)


def canonicalize_op(value: Any) -> str:
    return re.sub(r"[^a-z0-9]+", "_", str(value).lower()).strip("_")


def _expect_dict(spec: Any, where: str) -> dict[str, Any]:
    if not isinstance(spec, Mapping):
        raise ConfigError(f"Invalid tree node at {where}: expected an object, got {type(spec).__name__}")
    return dict(spec)


def _expect_list(value: Any, where: str) -> list[Any]:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"Invalid tree node at {where}: expected a non-empty list")
    return value


def normalize_tree_spec(spec: Any, where: str = "tree") -> dict[str, Any]:
    """Canonical dict form of a tree spec; parse -> normalize -> normalize is a fixed point."""
    node = _expect_dict(spec, where)
    if "leaf" in node:
        extra = sorted(set(node) - {"leaf"})
        if extra:
            raise ConfigError(f"Invalid leaf at {where}: unexpected keys {', '.join(extra)}")
        return {"leaf": str(node["leaf"])}
    if "op" not in node:
        raise ConfigError(f"Invalid tree node at {where}: expected 'leaf' or 'op'")
    op = canonicalize_op(node["op"])
    if op not in OPS:
        raise ConfigError(f"Unknown tree op '{node['op']}' at {where}; expected one of {', '.join(OPS)}")

    if op == "product":
        children = _expect_list(node.get("children"), f"{where}.children")
        return {"op": op, "children": [normalize_tree_spec(c, f"{where}.children[{i}]") for i, c in enumerate(children)]}
    if op == "mixture":
        children = _expect_list(node.get("children"), f"{where}.children")
        out: dict[str, Any] = {
            "op": op,
            "children": [normalize_tree_spec(c, f"{where}.children[{i}]") for i, c in enumerate(children)],
        }
        if node.get("weights") is not None:
            out["weights"] = [to_float(w, "mixture weight") for w in _expect_list(node["weights"], f"{where}.weights")]
        return out
    if op == "negation":
        return {
            "op": op,
            "positive": normalize_tree_spec(node.get("positive"), f"{where}.positive"),
            "negative": normalize_tree_spec(node.get("negative"), f"{where}.negative"),
            "alpha": to_float(node.get("alpha", 0.5), "alpha"),
        }
    if op == "temper":
        return {
            "op": op,
            "child": normalize_tree_spec(node.get("child"), f"{where}.child"),
            "lambda": to_float(node.get("lambda"), "lambda"),
        }
    if op == "guidance":
        return {
            "op": op,
            "prior": normalize_tree_spec(node.get("prior"), f"{where}.prior"),
            "term": normalize_tree_spec(node.get("term"), f"{where}.term"),
            "lambda": to_float(node.get("lambda"), "lambda"),
        }
    if op == "conditional_product":
        conds = _expect_list(node.get("conditionals"), f"{where}.conditionals")
        return {
            "op": op,
            "unconditional": normalize_tree_spec(node.get("unconditional"), f"{where}.unconditional"),
            "conditionals": [normalize_tree_spec(c, f"{where}.conditionals[{i}]") for i, c in enumerate(conds)],
        }
    if op == "classifier":
        if "model" not in node:
            raise ConfigError(f"Invalid classifier at {where}: missing 'model'")
        return {"op": op, "model": str(node["model"]), "label": to_int(node.get("label"), "label")}
    return {
        "op": op,
        "conditional": normalize_tree_spec(node.get("conditional"), f"{where}.conditional"),
        "unconditional": normalize_tree_spec(node.get("unconditional"), f"{where}.unconditional"),
    }


def referenced_models(spec: dict[str, Any]) -> list[str]:
    """Model names a normalized spec refers to, in first-use order."""
    names: list[str] = []

    def visit(node: dict[str, Any]) -> None:
        if "leaf" in node:
            name = node["leaf"]
        elif node["op"] == "classifier":
            name = node["model"]
        else:
            for key in ("children", "conditionals"):
                for child in node.get(key, []):
                    visit(child)
            for key in ("positive", "negative", "child", "prior", "term", "unconditional", "conditional"):
                if key in node:
                    visit(node[key])
            return
        if name not in names:
            names.append(name)

    visit(spec)
    return names


def build_tree(spec: dict[str, Any], models: Mapping[str, Any]) -> CompositionTree:
    """Build a CompositionTree from a normalized spec, resolving leaves by model name."""
    missing = [name for name in referenced_models(spec) if name not in models]
    if missing:
        raise ConfigError(f"Tree references unknown model(s): {', '.join(missing)}")
    return _build(spec, models)


def _build(node: dict[str, Any], models: Mapping[str, Any]) -> CompositionTree:
    if "leaf" in node:
        return leaf(models[node["leaf"]], node["leaf"])
    op = node["op"]
    if op == "product":
        return product(*[_build(c, models) for c in node["children"]])
    if op == "mixture":
        return mixture([_build(c, models) for c in node["children"]], node.get("weights"))
    if op == "negation":
        return negation(_build(node["positive"], models), _build(node["negative"], models), node["alpha"])
    if op == "temper":
        return temper(_build(node["child"], models), node["lambda"])
    if op == "guidance":
        return guidance(_build(node["prior"], models), _build(node["term"], models), node["lambda"])
    if op == "conditional_product":
        return conditional_product(
            _build(node["unconditional"], models),
            [_build(c, models) for c in node["conditionals"]],
        )
    if op == "classifier":
        return guidance_term_explicit(models[node["model"]], node["label"], name=node["model"])
    return guidance_term_implicit(_build(node["conditional"], models), _build(node["unconditional"], models))
