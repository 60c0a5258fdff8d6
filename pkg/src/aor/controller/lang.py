"""Sandboxed controller scripting language.

Controller sources are a small, deterministic subset of Python executed by a
tree-walking interpreter: scalar/vector arithmetic, comparisons, branching,
bounded loops, lists/tuples/dicts, function definitions, and module-level
state mutated through ``global``. There is no attribute access, no import,
no I/O, no clock, and no randomness -- scripts can only compute on the values
they are handed. Every evaluated node costs one tick against an instruction
budget, so adversarial loops terminate by construction.
"""
from __future__ import annotations

import ast
import math

DEFAULT_BUDGET = 1_000_000
MAX_CALL_DEPTH = 32


class ScriptError(Exception):
    """Any failure raised by or about a controller script."""


class BudgetExceeded(ScriptError):
    pass


class ForbiddenNode(ScriptError):
    """Source uses a construct outside the sandboxed subset."""


def _clamp(x, lo, hi):
    return lo if x < lo else hi if x > hi else x


def _sign(x):
    return (x > 0) - (x < 0)


def _ema(alpha, new, prev):
    return alpha * new + (1.0 - alpha) * prev


BUILTINS = {
    "abs": abs,
    "min": min,
    "max": max,
    "len": len,
    "range": range,
    "round": round,
    "int": int,
    "float": float,
    "bool": bool,
    "clamp": _clamp,
    "sign": _sign,
    "sqrt": math.sqrt,
    "floor": math.floor,
    "ceil": math.ceil,
    "hypot": math.hypot,
    "atan2": math.atan2,
    "sin": math.sin,
    "cos": math.cos,
    "tanh": math.tanh,
    "pi": math.pi,          # constant, not callable
    "ema": _ema,
    "norm2": math.hypot,
    "norm3": lambda x, y, z: math.sqrt(x * x + y * y + z * z),
}

_ALLOWED_STMT = (
    ast.Module, ast.Expr, ast.Assign, ast.AugAssign, ast.If, ast.While,
    ast.For, ast.Break, ast.Continue, ast.Pass, ast.Return, ast.FunctionDef,
    ast.Global,
)
_ALLOWED_EXPR = (
    ast.Constant, ast.Name, ast.BinOp, ast.UnaryOp, ast.BoolOp, ast.Compare,
    ast.Call, ast.Subscript, ast.List, ast.Tuple, ast.Dict, ast.IfExp,
    ast.Load, ast.Store,
)
_ALLOWED_OPS = (
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.FloorDiv, ast.Mod, ast.Pow,
    ast.USub, ast.UAdd, ast.Not, ast.And, ast.Or,
    ast.Eq, ast.NotEq, ast.Lt, ast.LtE, ast.Gt, ast.GtE,
    ast.Is, ast.IsNot, ast.In, ast.NotIn,
)
_ALLOWED = _ALLOWED_STMT + _ALLOWED_EXPR + _ALLOWED_OPS + (ast.arguments, ast.arg)


def check_source(source: str) -> ast.Module:
    """Parse and verify a script against the sandbox whitelist."""
    try:
        tree = ast.parse(source, mode="exec")
    except (SyntaxError, ValueError, MemoryError, RecursionError) as exc:
        raise ForbiddenNode(f"syntax error: {exc}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ForbiddenNode(
                f"forbidden construct {type(node).__name__} at line "
                f"{getattr(node, 'lineno', '?')}")
        if isinstance(node, ast.Constant) and not isinstance(
                node.value, (int, float, bool, str, type(None))):
            raise ForbiddenNode("only number/string/bool/None literals allowed")
        if isinstance(node, ast.FunctionDef):
            if node.decorator_list:
                raise ForbiddenNode("decorators are not allowed")
            a = node.args
            if a.vararg or a.kwarg or a.kwonlyargs or a.posonlyargs or a.defaults:
                raise ForbiddenNode("only plain positional parameters allowed")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name):
                raise ForbiddenNode("only plain function calls allowed")
            if node.keywords:
                raise ForbiddenNode("keyword arguments are not allowed")
    return tree


class _Return(Exception):
    def __init__(self, value):
        self.value = value


class _Break(Exception):
    pass


class _Continue(Exception):
    pass


class UserFunction:
    def __init__(self, node: ast.FunctionDef):
        self.node = node
        self.name = node.name
        self.params = [a.arg for a in node.args.args]


class Interpreter:
    """Executes a checked module AST against a private namespace."""

    def __init__(self, tree: ast.Module, budget: int = DEFAULT_BUDGET):
        self.tree = tree
        self.budget = budget
        self.globals: dict = {}
        self._ticks = 0
        self._depth = 0

    # -- public API --------------------------------------------------------

    def run_module(self) -> None:
        """Execute top-level statements (constants, defs, initial state)."""
        self._begin()
        for stmt in self.tree.body:
            self._exec(stmt, None)

    def call(self, name: str, args: tuple = ()) :
        """Invoke a module-level function under a fresh instruction budget."""
        fn = self.globals.get(name)
        if not isinstance(fn, UserFunction):
            raise ScriptError(f"{name!r} is not a function")
        self._begin()
        return self._call_function(fn, list(args))

    # -- machinery ---------------------------------------------------------

    def _begin(self):
        self._ticks = 0
        self._depth = 0

    def _tick(self):
        self._ticks += 1
        if self._ticks > self.budget:
            raise BudgetExceeded(f"instruction budget of {self.budget} exceeded")

    def _call_function(self, fn: UserFunction, args: list):
        if len(args) != len(fn.params):
            raise ScriptError(
                f"{fn.name}() takes {len(fn.params)} arguments, got {len(args)}")
        self._depth += 1
        if self._depth > MAX_CALL_DEPTH:
            raise ScriptError("call depth limit exceeded")
        local = dict(zip(fn.params, args))
        declared_global: set = set()
        try:
            for stmt in fn.node.body:
                self._exec(stmt, (local, declared_global))
        except _Return as ret:
            return ret.value
        finally:
            self._depth -= 1
        return None

    def _exec(self, node, scope):
        self._tick()
        if isinstance(node, ast.Expr):
            self._eval(node.value, scope)
        elif isinstance(node, ast.Assign):
            value = self._eval(node.value, scope)
            for target in node.targets:
                self._assign(target, value, scope)
        elif isinstance(node, ast.AugAssign):
            current = self._eval_target(node.target, scope)
            rhs = self._eval(node.value, scope)
            value = self._binop(node.op, current, rhs)
            self._assign(node.target, value, scope)
        elif isinstance(node, ast.If):
            branch = node.body if self._truth(self._eval(node.test, scope)) else node.orelse
            for stmt in branch:
                self._exec(stmt, scope)
        elif isinstance(node, ast.While):
            while self._truth(self._eval(node.test, scope)):
                self._tick()
                try:
                    for stmt in node.body:
                        self._exec(stmt, scope)
                except _Break:
                    break
                except _Continue:
                    continue
        elif isinstance(node, ast.For):
            iterable = self._eval(node.iter, scope)
            if not isinstance(iterable, (range, list, tuple, str)):
                raise ScriptError("for loops iterate over range/list/tuple only")
            for item in iterable:
                self._tick()
                self._assign(node.target, item, scope)
                try:
                    for stmt in node.body:
                        self._exec(stmt, scope)
                except _Break:
                    break
                except _Continue:
                    continue
        elif isinstance(node, ast.FunctionDef):
            fn = UserFunction(node)
            if scope is None:
                self.globals[node.name] = fn
            else:
                scope[0][node.name] = fn
        elif isinstance(node, ast.Return):
            raise _Return(None if node.value is None
                          else self._eval(node.value, scope))
        elif isinstance(node, ast.Global):
            if scope is not None:
                scope[1].update(node.names)
        elif isinstance(node, ast.Break):
            raise _Break()
        elif isinstance(node, ast.Continue):
            raise _Continue()
        elif isinstance(node, ast.Pass):
            pass
        else:
            raise ScriptError(f"unsupported statement {type(node).__name__}")

    def _assign(self, target, value, scope):
        if isinstance(target, ast.Name):
            if scope is None or target.id in scope[1]:
                self.globals[target.id] = value
            else:
                scope[0][target.id] = value
        elif isinstance(target, ast.Subscript):
            container = self._eval(target.value, scope)
            key = self._eval(target.slice, scope)
            try:
                container[key] = value
            except Exception as exc:
                raise ScriptError(f"subscript assignment failed: {exc}") from None
        elif isinstance(target, (ast.Tuple, ast.List)):
            try:
                items = list(value)
            except Exception:
                raise ScriptError("cannot unpack non-sequence") from None
            if len(items) != len(target.elts):
                raise ScriptError("unpack length mismatch")
            for sub, item in zip(target.elts, items):
                self._assign(sub, item, scope)
        else:
            raise ScriptError(f"invalid assignment target {type(target).__name__}")

    def _eval_target(self, target, scope):
        # current value of an AugAssign target
        if isinstance(target, ast.Name):
            return self._lookup(target.id, scope)
        if isinstance(target, ast.Subscript):
            return self._eval(target, scope)
        raise ScriptError("invalid augmented assignment target")

    def _lookup(self, name, scope):
        if scope is not None and name in scope[0] and name not in scope[1]:
            return scope[0][name]
        if name in self.globals:
            return self.globals[name]
        if name in BUILTINS:
            return BUILTINS[name]
        raise ScriptError(f"name {name!r} is not defined")

    def _truth(self, value):
        try:
            return bool(value)
        except Exception as exc:
            raise ScriptError(f"bad condition: {exc}") from None

    def _binop(self, op, left, right):
        try:
            if isinstance(op, ast.Add):
                return left + right
            if isinstance(op, ast.Sub):
                return left - right
            if isinstance(op, ast.Mult):
                return left * right
            if isinstance(op, ast.Div):
                return left / right
            if isinstance(op, ast.FloorDiv):
                return left // right
            if isinstance(op, ast.Mod):
                return left % right
            if isinstance(op, ast.Pow):
                if isinstance(left, (int, float)) and isinstance(right, (int, float)):
                    if abs(right) > 64:
                        raise ScriptError("exponent out of range")
                return left ** right
        except ScriptError:
            raise
        except Exception as exc:
            raise ScriptError(f"arithmetic error: {exc}") from None
        raise ScriptError(f"unsupported operator {type(op).__name__}")

    def _compare(self, op, left, right):
        try:
            if isinstance(op, ast.Eq):
                return left == right
            if isinstance(op, ast.NotEq):
                return left != right
            if isinstance(op, ast.Lt):
                return left < right
            if isinstance(op, ast.LtE):
                return left <= right
            if isinstance(op, ast.Gt):
                return left > right
            if isinstance(op, ast.GtE):
                return left >= right
            if isinstance(op, ast.Is):
                return left is right
            if isinstance(op, ast.IsNot):
                return left is not right
            if isinstance(op, ast.In):
                return left in right
            if isinstance(op, ast.NotIn):
                return left not in right
        except Exception as exc:
            raise ScriptError(f"comparison error: {exc}") from None
        raise ScriptError(f"unsupported comparison {type(op).__name__}")

    def _eval(self, node, scope):
        self._tick()
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            return self._lookup(node.id, scope)
        if isinstance(node, ast.BinOp):
            return self._binop(node.op, self._eval(node.left, scope),
                               self._eval(node.right, scope))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, scope)
            try:
                if isinstance(node.op, ast.USub):
                    return -val
                if isinstance(node.op, ast.UAdd):
                    return +val
                if isinstance(node.op, ast.Not):
                    return not val
            except Exception as exc:
                raise ScriptError(f"unary error: {exc}") from None
        if isinstance(node, ast.BoolOp):
            if isinstance(node.op, ast.And):
                result = True
                for sub in node.values:
                    result = self._eval(sub, scope)
                    if not self._truth(result):
                        return result
                return result
            result = False
            for sub in node.values:
                result = self._eval(sub, scope)
                if self._truth(result):
                    return result
            return result
        if isinstance(node, ast.Compare):
            left = self._eval(node.left, scope)
            for op, comparator in zip(node.ops, node.comparators):
                right = self._eval(comparator, scope)
                if not self._compare(op, left, right):
                    return False
                left = right
            return True
        if isinstance(node, ast.Call):
            fn = self._lookup(node.func.id, scope)
            args = [self._eval(a, scope) for a in node.args]
            if isinstance(fn, UserFunction):
                return self._call_function(fn, args)
            if callable(fn):
                try:
                    return fn(*args)
                except ScriptError:
                    raise
                except Exception as exc:
                    raise ScriptError(f"{node.func.id}(): {exc}") from None
            raise ScriptError(f"{node.func.id!r} is not callable")
        if isinstance(node, ast.Subscript):
            container = self._eval(node.value, scope)
            key = self._eval(node.slice, scope)
            try:
                return container[key]
            except Exception as exc:
                raise ScriptError(f"subscript error: {exc}") from None
        if isinstance(node, ast.List):
            return [self._eval(e, scope) for e in node.elts]
        if isinstance(node, ast.Tuple):
            return tuple(self._eval(e, scope) for e in node.elts)
        if isinstance(node, ast.Dict):
            out = {}
            for k, v in zip(node.keys, node.values):
                if k is None:
                    raise ScriptError("dict unpacking is not allowed")
                out[self._eval(k, scope)] = self._eval(v, scope)
            return out
        if isinstance(node, ast.IfExp):
            if self._truth(self._eval(node.test, scope)):
                return self._eval(node.body, scope)
            return self._eval(node.orelse, scope)
        raise ScriptError(f"unsupported expression {type(node).__name__}")
