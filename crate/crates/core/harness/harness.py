#!/usr/bin/env python3
"""Schema extraction and JSON invocation for generated tool functions.

    harness.py --mode schema|invoke --module PATH --function NAME

The request remainder is one JSON document on stdin (``{"args": {...}}`` for
invoke). The response is one JSON document on stdout; anything the tool
prints, including output of subprocesses it starts, goes to stderr.
"""

import argparse
import contextlib
import importlib.util
import inspect
import json
import os
import sys
import traceback
import typing

TRACEBACK_LIMIT = 2000


class HarnessError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
        self.message = message


def _load(path):
    if not os.path.isfile(path):
        raise HarnessError("MODULE_NOT_FOUND", "no module at %s" % path)
    spec = importlib.util.spec_from_file_location("generated_tool", path)
    module = importlib.util.module_from_spec(spec)
    try:
        spec.loader.exec_module(module)
    except BaseException as exc:  # noqa: BLE001 - any failure during import is reported
        raise HarnessError(
            "IMPORT_ERROR", "%s: %s" % (type(exc).__name__, exc)
        ) from exc
    return module


def _function(module, name):
    func = getattr(module, name, None)
    if func is None or not inspect.isfunction(func):
        raise HarnessError("FUNCTION_NOT_FOUND", "module defines no function %r" % name)
    return func


def _strip_annotated(tp):
    if typing.get_origin(tp) is typing.Annotated:
        args = typing.get_args(tp)
        return args[0], [m for m in tp.__metadata__ if isinstance(m, str)]
    return tp, []


_NUMERIC = (int, float)


def _type_schema(tp, where):
    tp, _ = _strip_annotated(tp)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if tp is type(None) or tp is None:
        return {"type": "null"}
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    if tp is list or tp is tuple or tp is set:
        raise HarnessError(
            "UNSUPPORTED_TYPE",
            "%s: bare %s has no item type (array schema missing items)" % (where, tp.__name__),
        )
    if tp is dict:
        return {"type": "object"}
    if origin in (list, set, frozenset) or origin is getattr(typing, "Sequence", None):
        return {"type": "array", "items": _type_schema(args[0], where)}
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return {"type": "array", "items": _type_schema(args[0], where)}
        items = [_type_schema(a, where) for a in args]
        if items and all(i == items[0] for i in items):
            return {"type": "array", "items": items[0], "minItems": len(items), "maxItems": len(items)}
        return {"type": "array", "items": {"anyOf": items}, "minItems": len(items), "maxItems": len(items)}
    if origin is dict:
        schema = {"type": "object"}
        if len(args) == 2:
            schema["additionalProperties"] = _type_schema(args[1], where)
        return schema
    if origin is typing.Union:
        members = [_strip_annotated(a)[0] for a in args]
        non_null = [m for m in members if m is not type(None)]
        if non_null and all(m in _NUMERIC for m in non_null):
            base = {"type": "integer"} if all(m is int for m in non_null) else {"type": "number"}
            if len(non_null) == len(members):
                return base
            return {"anyOf": [base, {"type": "null"}]}
        return {"anyOf": [_type_schema(m, where) for m in members]}
    if origin is typing.Literal:
        return {"enum": list(args)}
    raise HarnessError("UNSUPPORTED_TYPE", "%s: unsupported annotation %r" % (where, tp))


def _description(func):
    doc = inspect.getdoc(func)
    if not doc or not doc.strip():
        raise HarnessError("MISSING_DESCRIPTION", "function %s has no docstring" % func.__name__)
    return doc.strip().split("\n\n")[0].replace("\n", " ").strip()


def extract_schema(func):
    description = _description(func)
    try:
        hints = typing.get_type_hints(func, include_extras=True)
    except Exception as exc:  # noqa: BLE001
        raise HarnessError("UNSUPPORTED_TYPE", "cannot resolve annotations: %s" % exc) from exc
    properties = {}
    required = []
    for name, param in inspect.signature(func).parameters.items():
        if param.kind in (param.VAR_POSITIONAL, param.VAR_KEYWORD):
            raise HarnessError(
                "VARIADIC_PARAM", "parameter %s is variadic (*args/**kwargs are not allowed)" % name
            )
        if name not in hints:
            raise HarnessError("UNANNOTATED_PARAM", "parameter %s has no annotation" % name)
        _, texts = _strip_annotated(hints[name])
        if not texts or not texts[0].strip():
            raise HarnessError(
                "MISSING_DESCRIPTION",
                "parameter %s must be annotated as Annotated[<type>, \"<description>\"]" % name,
            )
        prop = _type_schema(hints[name], "parameter %s" % name)
        prop["description"] = texts[0].strip()
        if param.default is param.empty:
            required.append(name)
        else:
            try:
                json.dumps(param.default)
                prop["default"] = param.default
            except TypeError:
                pass
        properties[name] = prop
    return {
        "name": func.__name__,
        "description": description,
        "parameters": {"type": "object", "properties": properties, "required": required},
    }


def invoke(func, args):
    if not isinstance(args, dict):
        raise HarnessError("BAD_REQUEST", "args must be a JSON object")
    params = inspect.signature(func).parameters
    missing = [
        n for n, p in params.items()
        if p.default is p.empty and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD) and n not in args
    ]
    if missing:
        raise HarnessError("MISSING_ARGUMENT", "missing required argument(s): %s" % ", ".join(missing))
    unknown = [n for n in args if n not in params]
    if unknown:
        raise HarnessError("UNEXPECTED_ARGUMENT", "unexpected argument(s): %s" % ", ".join(unknown))
    value = func(**args)
    try:
        json.dumps(value)
        return {"ok": True, "result": value}
    except (TypeError, ValueError):
        return {"ok": True, "result": repr(value) if not isinstance(value, str) else value, "stringified": True}


def _error(code, message, tb=""):
    return {"ok": False, "error": {"type": code, "message": message, "traceback_excerpt": tb[-TRACEBACK_LIMIT:]}}


def run(argv, stdin_text):
    parser = argparse.ArgumentParser(prog="harness")
    parser.add_argument("--mode", choices=["schema", "invoke"], required=True)
    parser.add_argument("--module", required=True)
    parser.add_argument("--function", required=True)
    opts = parser.parse_args(argv)
    try:
        request = json.loads(stdin_text) if stdin_text.strip() else {}
    except ValueError as exc:
        return _error("BAD_REQUEST", "stdin is not JSON: %s" % exc)
    try:
        module = _load(opts.module)
        func = _function(module, opts.function)
        if opts.mode == "schema":
            return {"ok": True, "result": extract_schema(func)}
        return invoke(func, request.get("args", {}))
    except HarnessError as exc:
        cause = exc.__cause__
        tb = "".join(traceback.format_exception(type(cause), cause, cause.__traceback__)) if cause else ""
        return _error(exc.code, exc.message, tb)
    except BaseException as exc:  # noqa: BLE001 - tool exceptions become structured errors
        return _error(type(exc).__name__, str(exc), traceback.format_exc())


def main():
    stdin_text = sys.stdin.read()
    sys.stdout.flush()
    protocol_fd = os.dup(1)
    os.dup2(2, 1)
    with contextlib.redirect_stdout(sys.stderr):
        response = run(sys.argv[1:], stdin_text)
    sys.stderr.flush()
    with os.fdopen(protocol_fd, "w", encoding="utf-8") as out:
        out.write(json.dumps(response, default=repr))
        out.write("\n")


if __name__ == "__main__":
    main()
