"""Fixed-template expression trees.

A tree has two faces. The *genotype* is a fixed-length array of symbol codes
laid out over a template (left-deep or full), which is what variation and
linkage learning operate on. The *phenotype* is an :class:`Expr`, the
expressed symbolic formula with introns dropped and function-class constants
(CFCs) numbered left to right. Evaluation, simplification and cache keys all
work on the phenotype.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

OPERATORS = (
    "add", "sub", "mul", "div", "div_m", "exp_prod", "exp", "pow", "pow_m", "log_p",
)
TERMINALS = ("t", "c")
SYMBOLS = OPERATORS + TERMINALS
SYMBOL_CODE = {name: code for code, name in enumerate(SYMBOLS)}
ARITY = {name: (1 if name in ("exp", "log_p") else 2) for name in OPERATORS}
ARITY.update({"t": 0, "c": 0})

INFIX_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}

EXP_CLAMP = 700.0
DENOM_FLOOR = 1e-10
POW_CLAMP = 1e15
# applied to every operator output so squared residuals cannot overflow
VALUE_CLAMP = 1e150

CFC_LOW = -10_000.0
CFC_HIGH = 10_000.0


# ---------------------------------------------------------------------------
# protected operators

def _clip(x):
    return np.clip(x, -VALUE_CLAMP, VALUE_CLAMP)


def _safe_exp(x):
    return np.exp(np.clip(x, -EXP_CLAMP, EXP_CLAMP))


def _protected_div(a, b):
    b = np.asarray(b, dtype=float)
    safe = np.where(b < 0, -1.0, 1.0) * np.maximum(np.abs(b), DENOM_FLOOR)
    return _clip(a / safe)


def _protected_pow(base, exponent):
    logb = np.log(np.maximum(np.abs(base), DENOM_FLOOR))
    return np.minimum(_safe_exp(exponent * logb), POW_CLAMP)


def _protected_log(x):
    return np.log(np.maximum(np.abs(x), DENOM_FLOOR))


OPERATOR_FUNCS = {
    "add": lambda a, b: _clip(a + b),
    "sub": lambda a, b: _clip(a - b),
    "mul": lambda a, b: _clip(a * b),
    "div": _protected_div,
    "div_m": lambda a, b: _protected_div(b, a),
    "exp_prod": lambda a, b: _clip(_safe_exp(a * b)),
    "exp": lambda a: _clip(_safe_exp(a)),
    "pow": _protected_pow,
    "pow_m": lambda a, b: _protected_pow(b, a),
    "log_p": _protected_log,
}


def apply_operator(name, *args):
    """Apply a protected operator elementwise; never returns NaN or inf."""
    with np.errstate(all="ignore"):
        return OPERATOR_FUNCS[name](*args)


# ---------------------------------------------------------------------------
# phenotype

class Expr:
    """Immutable expression node.

    ``kind`` is an operator name, ``"t"`` or ``"c"``; CFC nodes carry their
    constant index in ``slot``. Equality and hashing go through the infix key.
    """

    __slots__ = ("kind", "children", "slot", "key", "n_cfc", "n_nodes")

    def __init__(self, kind, children=(), slot=-1):
        if kind not in ARITY:
            raise ValueError(f"unknown node kind {kind!r}")
        if len(children) != ARITY[kind]:
            raise ValueError(f"{kind} takes {ARITY[kind]} children, got {len(children)}")
        self.kind = kind
        self.children = tuple(children)
        self.slot = slot
        self.n_cfc = (1 if kind == "c" else 0) + sum(ch.n_cfc for ch in self.children)
        self.n_nodes = 1 + sum(ch.n_nodes for ch in self.children)
        self.key = _render(self)

    def __eq__(self, other):
        return isinstance(other, Expr) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        return f"Expr({self.key!r})"

    def __str__(self):
        return self.key

    def __reduce__(self):
        return (parse, (self.key,))

    @property
    def is_terminal(self):
        return not self.children

    def slots(self):
        """CFC slot indices in left-to-right order."""
        if self.kind == "c":
            return [self.slot]
        out = []
        for ch in self.children:
            out.extend(ch.slots())
        return out

    @property
    def n_constants(self):
        """Length of the constant vector this expression reads."""
        s = self.slots()
        return max(s) + 1 if s else 0

    def walk(self):
        yield self
        for ch in self.children:
            yield from ch.walk()


def _render(node):
    if node.kind == "t":
        return "t"
    if node.kind == "c":
        return f"c{node.slot}"
    if node.kind in INFIX_SYMBOL:
        a, b = node.children
        return f"({a.key} {INFIX_SYMBOL[node.kind]} {b.key})"
    return f"{node.kind}({', '.join(ch.key for ch in node.children)})"


def var():
    return Expr("t")


def cfc(slot=0):
    return Expr("c", slot=slot)


def node(kind, *children):
    return Expr(kind, children)


def to_infix_key(expr):
    """Canonical, fully parenthesised infix string (no algebraic rewriting)."""
    if isinstance(expr, ExpressionTree):
        expr = expr.to_expr()
    return expr.key


_TOKEN = re.compile(r"\s*(?:(?P<num>c\d+)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<sym>[-+*/(),]))")


class ParseError(ValueError):
    pass


def parse(text):
    """Parse the infix grammar produced by :func:`to_infix_key`.

    ``x`` is accepted as an alias of the variable ``t``.
    """
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character at position {pos}: {text[pos:pos + 10]!r}")
        tokens.append(m.group("num") or m.group("name") or m.group("sym"))
        pos = m.end()
    if not tokens:
        raise ParseError("empty expression")

    it = _Cursor(tokens)
    out = _parse_expr(it)
    if it.peek() is not None:
        raise ParseError(f"trailing input starting at {it.peek()!r}")
    return out


class _Cursor:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self, expected=None):
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of expression")
        if expected is not None and tok != expected:
            raise ParseError(f"expected {expected!r}, got {tok!r}")
        self.i += 1
        return tok


_SYMBOL_OP = {v: k for k, v in INFIX_SYMBOL.items()}


def _parse_expr(it):
    tok = it.take()
    if tok == "(":
        left = _parse_expr(it)
        op = it.take()
        if op not in _SYMBOL_OP:
            raise ParseError(f"expected one of + - * /, got {op!r}")
        right = _parse_expr(it)
        it.take(")")
        return Expr(_SYMBOL_OP[op], (left, right))
    if tok in ("t", "x"):
        return var()
    if re.fullmatch(r"c\d+", tok):
        return cfc(int(tok[1:]))
    if tok in ARITY and ARITY[tok] > 0 and tok not in INFIX_SYMBOL:
        it.take("(")
        args = [_parse_expr(it)]
        while it.peek() == ",":
            it.take(",")
            args.append(_parse_expr(it))
        it.take(")")
        if len(args) != ARITY[tok]:
            raise ParseError(f"{tok} takes {ARITY[tok]} arguments, got {len(args)}")
        return Expr(tok, args)
    raise ParseError(f"unexpected token {tok!r}")


def renumber(expr):
    """Renumber CFC slots 0..K-1 in left-to-right order."""
    counter = iter(range(expr.n_cfc))

    def rec(e):
        if e.kind == "c":
            return cfc(next(counter))
        if e.kind == "t":
            return e
        return Expr(e.kind, tuple(rec(ch) for ch in e.children))

    return rec(expr)


def simplify(expr):
    """Collapse every maximal CFC-only subtree into one CFC, then renumber.

    A subtree whose terminals are all CFCs can take any value the collapsed
    constant can (up to the bounds), so after refitting constants the two
    forms describe the same function class. Idempotent.
    """
    if isinstance(expr, ExpressionTree):
        expr = expr.to_expr(simplified=False)

    def rec(e):
        if e.kind in ("t", "c"):
            return e
        kids = tuple(rec(ch) for ch in e.children)
        if all(k.kind == "c" for k in kids):
            return cfc(0)
        return Expr(e.kind, kids)

    return renumber(rec(expr))


def cfc_count(expr):
    """Number of CFC terminals in the simplified phenotype."""
    if isinstance(expr, ExpressionTree):
        return expr.to_expr().n_cfc
    return simplify(expr).n_cfc


# ---------------------------------------------------------------------------
# subtree output cache

class SubtreeCache:
    """Memo of constant-free subtree outputs keyed by (subtree key, data id).

    Plain dict operations: concurrent writers may overwrite each other with
    identical arrays, which is harmless.
    """

    def __init__(self, max_entries=200_000):
        self.max_entries = max_entries
        self._store = {}
        self.hits = 0
        self.misses = 0

    def get(self, key, data_id, compute):
        k = (key, data_id)
        val = self._store.get(k)
        if val is not None:
            self.hits += 1
            return val
        self.misses += 1
        val = compute()
        val.setflags(write=False)
        if len(self._store) >= self.max_entries:
            self._store.clear()
        self._store[k] = val
        return val

    def clear(self):
        self._store.clear()

    def __len__(self):
        return len(self._store)


default_subtree_cache = SubtreeCache()


def _eval_constant_free(e, t):
    if e.kind == "t":
        return t
    if e.kind == "c":
        raise ValueError("constant-free evaluation reached a CFC")
    return apply_operator(e.kind, *(_eval_constant_free(ch, t) for ch in e.children))


class CompiledExpr:
    """Expression bound to fixed input ages, evaluated for many constant vectors.

    Outputs of subtrees without CFCs do not depend on the constants; they are
    computed once (and shared through ``cache`` under ``data_id``) instead of
    on every call.
    """

    def __init__(self, expr, t, data_id=None, cache=None):
        self.expr = expr
        self.t = np.asarray(t, dtype=float)
        self.data_id = data_id
        self.cache = cache if data_id is not None else None
        self.n_constants = expr.n_constants
        self.cached_subtrees = []
        self._fn = self._build(expr)

    def _constant_free(self, e):
        if self.cache is None:
            return apply_operator_tree(e, self.t)
        self.cached_subtrees.append(e.key)
        return self.cache.get(e.key, self.data_id, lambda: apply_operator_tree(e, self.t))

    def _build(self, e):
        if e.n_cfc == 0:
            if e.kind == "t":
                t = self.t
                return lambda C: t
            value = self._constant_free(e)
            return lambda C: value
        if e.kind == "c":
            s = e.slot
            return lambda C: C[:, s:s + 1]
        op = OPERATOR_FUNCS[e.kind]
        fs = [self._build(ch) for ch in e.children]
        if len(fs) == 1:
            f0 = fs[0]
            return lambda C: op(f0(C))
        f0, f1 = fs
        return lambda C: op(f0(C), f1(C))

    def __call__(self, constants):
        """Evaluate for a ``(P, K)`` constant matrix; returns ``(P, n)``."""
        C = np.atleast_2d(np.asarray(constants, dtype=float))
        with np.errstate(all="ignore"):
            out = self._fn(C)
        return np.broadcast_to(out, (C.shape[0], self.t.shape[0]))


def apply_operator_tree(e, t):
    with np.errstate(all="ignore"):
        return np.array(np.broadcast_to(_eval_constant_free(e, t), np.shape(t)), dtype=float)


def evaluate(expr, constants, t_values):
    """Evaluate ``expr`` at ``t_values`` with one constant vector.

    Accepts an :class:`Expr` or a genotype :class:`ExpressionTree`.
    """
    if isinstance(expr, ExpressionTree):
        expr = expr.to_expr()
    t = np.atleast_1d(np.asarray(t_values, dtype=float))
    constants = np.asarray(constants, dtype=float).reshape(-1)
    if constants.size < expr.n_constants:
        raise ValueError(f"expression needs {expr.n_constants} constants, got {constants.size}")
    return np.array(CompiledExpr(expr, t)(constants[None, :])[0])


def constant_free_subtree_outputs(expr, t_values, data_id, cache=None):
    """Outputs of every maximal CFC-free, non-terminal subtree of ``expr``.

    Returns ``{subtree key: output vector}``; values come from (and land in)
    ``cache`` so later refits on the same data reuse them.
    """
    cache = default_subtree_cache if cache is None else cache
    t = np.asarray(t_values, dtype=float)
    out = {}

    def rec(e):
        if e.n_cfc == 0:
            if e.kind != "t":
                out[e.key] = cache.get(e.key, data_id, lambda: apply_operator_tree(e, t))
            return
        for ch in e.children:
            rec(ch)

    rec(expr)
    return out


# ---------------------------------------------------------------------------
# genotype

@dataclass(frozen=True)
class Template:
    """Fixed node layout: ``left[i]``/``right[i]`` are child positions, -1 at leaves."""

    tag: str
    height: int
    left: tuple
    right: tuple

    @property
    def size(self):
        return len(self.left)

    def is_internal(self, i):
        return self.left[i] >= 0

    @property
    def internal_positions(self):
        return [i for i in range(self.size) if self.left[i] >= 0]

    @property
    def terminal_positions(self):
        return [i for i in range(self.size) if self.left[i] < 0]


def left_deep_template(height):
    """Operators on a left spine, every right child a terminal.

    Positions ``0..h-1`` hold the spine (root first), ``h`` the bottom-left
    terminal and ``h+1..2h`` the right-hand terminals bottom-up, so terminal
    positions read left to right.
    """
    if height < 1:
        raise ValueError("height must be >= 1")
    h = height
    left = [i + 1 for i in range(h)] + [-1] * (h + 1)
    right = [2 * h - i for i in range(h)] + [-1] * (h + 1)
    return Template("left_deep", h, tuple(left), tuple(right))


def full_template(height):
    """Complete binary tree in heap order (children of ``i`` at ``2i+1, 2i+2``)."""
    if height < 1:
        raise ValueError("height must be >= 1")
    n = 2 ** (height + 1) - 1
    n_int = 2 ** height - 1
    left = [2 * i + 1 if i < n_int else -1 for i in range(n)]
    right = [2 * i + 2 if i < n_int else -1 for i in range(n)]
    return Template("full", height, tuple(left), tuple(right))


def make_template(tag, height):
    if tag == "left_deep":
        return left_deep_template(height)
    if tag == "full":
        return full_template(height)
    raise ValueError(f"unknown template {tag!r}")


class ExpressionTree:
    """Genotype: one symbol code per template position."""

    __slots__ = ("genes", "template", "_expr")

    def __init__(self, genes, template):
        genes = np.asarray(genes, dtype=np.int8)
        if genes.shape != (template.size,):
            raise ValueError(f"expected {template.size} genes, got {genes.shape}")
        for i, g in enumerate(genes):
            name = SYMBOLS[g]
            if template.is_internal(i) != (name in OPERATORS):
                raise ValueError(f"symbol {name!r} not legal at position {i}")
        self.genes = genes
        self.genes.setflags(write=False)
        self.template = template
        self._expr = None

    @property
    def height(self):
        return self.template.height

    def to_expr(self, simplified=True):
        if not simplified:
            return _decode(self.genes, self.template, 0)
        if self._expr is None:
            self._expr = simplify(_decode(self.genes, self.template, 0))
        return self._expr

    def symbols(self):
        return [SYMBOLS[g] for g in self.genes]

    def __eq__(self, other):
        return (isinstance(other, ExpressionTree) and self.template == other.template
                and np.array_equal(self.genes, other.genes))

    def __hash__(self):
        return hash((self.template.tag, self.genes.tobytes()))

    def __repr__(self):
        return f"ExpressionTree({' '.join(self.symbols())})"


def _decode(genes, template, i):
    name = SYMBOLS[genes[i]]
    if name == "t":
        return var()
    if name == "c":
        return cfc(0)
    kids = [_decode(genes, template, template.left[i])]
    if ARITY[name] == 2:
        kids.append(_decode(genes, template, template.right[i]))
    return Expr(name, kids)


def legal_symbols(template, position, operators=OPERATORS):
    """Alphabet at one position: operators on internal slots, terminals on leaves."""
    if template.is_internal(position):
        return [SYMBOL_CODE[o] for o in operators]
    return [SYMBOL_CODE[s] for s in TERMINALS]


def random_genes(rng, template, operators=OPERATORS):
    ops = np.array([SYMBOL_CODE[o] for o in operators], dtype=np.int8)
    terms = np.array([SYMBOL_CODE[s] for s in TERMINALS], dtype=np.int8)
    genes = np.empty(template.size, dtype=np.int8)
    for i in range(template.size):
        pool = ops if template.is_internal(i) else terms
        genes[i] = pool[rng.integers(len(pool))]
    return genes


def random_tree(rng, height, template="left_deep", operators=OPERATORS):
    """Draw each slot uniformly from the symbols legal there."""
    tpl = template if isinstance(template, Template) else make_template(template, height)
    return ExpressionTree(random_genes(rng, tpl, operators), tpl)


def tree_from_symbols(symbols, template):
    return ExpressionTree([SYMBOL_CODE[s] for s in symbols], template)
