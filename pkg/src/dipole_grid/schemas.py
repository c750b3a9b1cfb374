"""JSON schemas for the CLI configs.  Unknown keys are rejected everywhere."""
from __future__ import annotations

_num = {"type": "number"}
_vec3 = {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}
_vec6 = {"type": "array", "items": _num, "minItems": 6, "maxItems": 6}
_mat6 = {"oneOf": [_vec6, {"type": "array", "items": _vec6, "minItems": 6, "maxItems": 6}]}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


HEAD = _obj({"center": _vec3, "radius": {"type": "number", "exclusiveMinimum": 0}})

SENSORS = {"oneOf": [
    _obj({"file": {"type": "string"}}, ["file"]),
    _obj({
        "count": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "offset": {"type": "number", "exclusiveMinimum": 0},
        "modality": {"enum": ["MEG", "EEG"]},
        "conductivity": {"type": "number", "exclusiveMinimum": 0},
    }, ["count"]),
]}

SOURCE = _obj({"mu0": _vec6, "Sigma0": _mat6, "A": _mat6, "b": _vec6, "Sigma": _mat6},
              ["mu0", "Sigma0", "A", "b", "Sigma"])

MODEL = {"oneOf": [
    _obj({"case": {"enum": ["case1", "case2"]}}, ["case"]),
    _obj({"params_file": {"type": "string"}}, ["params_file"]),
    _obj({"sources": {"type": "array", "items": SOURCE, "minItems": 1},
          "noise_var": {"type": "number", "exclusiveMinimum": 0}}, ["sources", "noise_var"]),
]}

ROI = {"type": "array", "minItems": 3, "maxItems": 3,
       "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}}
MESH = {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "integer", "minimum": 1}}

EM = _obj({
    "update": {"type": "array", "uniqueItems": True,
               "items": {"enum": ["mu0", "Sigma0", "A", "b", "Sigma", "V"]}},
    "max_iters": {"type": "integer", "minimum": 1},
    "tol": {"type": "number", "exclusiveMinimum": 0},
    "diagonal_Sigma": {"type": "boolean"},
    "scalar_V": {"type": "boolean"},
    "location_block_only_A": {"type": "boolean"},
    "ridge": {"type": "number", "minimum": 0},
    "normalize": {"type": "boolean"},
    "stop_on": {"enum": ["Q", "loglik"]},
    "check_monotone": {"type": "boolean"},
    "variance_floor": {"type": "number", "minimum": 0},
})

DYNAMIC = _obj({
    "mesh_increment": {"type": "integer", "minimum": 0},
    "sigma_multiplier": {"type": "number", "exclusiveMinimum": 0},
    "max_outer_iters": {"type": "integer", "minimum": 1},
    "mesh_cap": {"type": "integer", "minimum": 1},
    "shrink": {"enum": ["every", "after_convergence", "never"]},
})

PROCEDURE = _obj({"dynamic": {"type": "boolean"}, "switch": {"type": "boolean"}})

_common = {"head": HEAD, "sensors": SENSORS, "kappa": {"type": "number", "exclusiveMinimum": 0}}
_fitting = {"roi": ROI, "mesh": MESH, "em": EM, "dynamic": DYNAMIC, "default_dynamics": {"type": "boolean"}}

SIMULATE = _obj(dict(_common, model=MODEL, T={"type": "integer", "minimum": 1},
                     seed={"type": "integer", "minimum": 0}),
                ["sensors", "model", "T"])

FIT = _obj(dict(_common, **_fitting, data={"type": "string"}, init=MODEL, procedure=PROCEDURE),
           ["data", "sensors", "init", "roi"])

COMPARE = _obj(dict(_common, **_fitting, model=MODEL, T={"type": "integer", "minimum": 1},
                    seed={"type": "integer", "minimum": 0},
                    replications={"type": "integer", "minimum": 1},
                    procedures={"type": "array", "minItems": 1, "uniqueItems": True,
                                "items": {"enum": ["dynamic", "nondynamic", "dynamic_switch",
                                                   "nondynamic_switch", "nondynamic_joint"]}}),
               ["sensors", "model", "T", "roi"])

PLOT = _obj({"posterior": {"type": "string"}, "trajectory": {"type": "string"},
             "bar_times": {"type": "array", "items": {"type": "integer", "minimum": 1}}},
            ["posterior"])

SCHEMAS = {"simulate": SIMULATE, "fit": FIT, "compare": COMPARE, "plot": PLOT}
