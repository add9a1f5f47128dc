"""Expression language: parsing, evaluation and symbolic differentiation.

A small AST over sums, products, negation and rational powers is used to
define plant nonlinearities and storage functions.  Grammar (EBNF):

    expr     = term , { ("+" | "-") , term } ;
    term     = unary , { "*" , unary } ;
    unary    = "-" , unary | power ;
    power    = atom , { "^" , exponent } ;        (* right-associative *)
    exponent = [ "-" ] , number
             | "(" , [ "-" ] , number , ")" ;
    atom     = number | identifier | "(" , expr , ")" ;
    number   = digits , [ "." , digits | "/" , digits ] ;

There is no division operator; "/" only appears inside rational literals
such as ``4/3``.  Rational exponents must reduce to an odd denominator and
evaluate as the sign-preserving real root

    x^(p/q) = sign(x)^p * |x|^(p/q),

so e.g. ``(-8)^(1/3) = -2`` and ``(-1)^(4/3) = 1``.  Exponents with an even
denominator are rejected at parse time because they are not real-valued on
negative bases.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union
import re

import numpy as np

__all__ = [
    "Expr", "Var", "Const", "Neg", "Sum", "Product", "Pow",
    "ExprError", "ParseError", "EvalError",
    "parse_expr", "evaluate", "differentiate", "fold_constants",
    "to_string", "normalize", "variables", "compile_exprs",
    "rational_power", "add", "mul", "const",
]


class ExprError(Exception):
    """Base class for expression-language errors."""


class ParseError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvalError(ExprError):
    pass


# --- AST -------------------------------------------------------------------
#
# All nodes are frozen; expression values are immutable after construction
# and safe to share between threads.

@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    value: Fraction

    def __post_init__(self):
        if not isinstance(self.value, Fraction):
            object.__setattr__(self, "value", Fraction(self.value))


@dataclass(frozen=True)
class Neg:
    child: "Expr"


@dataclass(frozen=True)
class Sum:
    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if len(self.terms) < 2:
            raise ValueError("Sum requires at least two terms; use add()")


@dataclass(frozen=True)
class Product:
    factors: tuple

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if len(self.factors) < 2:
            raise ValueError("Product requires at least two factors; use mul()")


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: Fraction

    def __post_init__(self):
        if not isinstance(self.exponent, Fraction):
            object.__setattr__(self, "exponent", Fraction(self.exponent))
        if self.exponent.denominator % 2 == 0:
            raise ValueError(
                f"rational exponent {self.exponent} has an even denominator"
            )


Expr = Union[Var, Const, Neg, Sum, Product, Pow]


def const(value) -> Const:
    return Const(Fraction(value))


def add(*terms: Expr) -> Expr:
    """n-ary sum; flattens nested sums, no constant folding."""
    flat: list = []
    for t in terms:
        if isinstance(t, Sum):
            flat.extend(t.terms)
        else:
            flat.append(t)
    if not flat:
        return Const(Fraction(0))
    if len(flat) == 1:
        return flat[0]
    return Sum(tuple(flat))


def mul(*factors: Expr) -> Expr:
    """n-ary product; flattens nested products, no constant folding."""
    flat: list = []
    for f in factors:
        if isinstance(f, Product):
            flat.extend(f.factors)
        else:
            flat.append(f)
    if not flat:
        return Const(Fraction(1))
    if len(flat) == 1:
        return flat[0]
    return Product(tuple(flat))


def variables(e: Expr) -> frozenset:
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Neg):
        return variables(e.child)
    if isinstance(e, Sum):
        return frozenset().union(*(variables(t) for t in e.terms))
    if isinstance(e, Product):
        return frozenset().union(*(variables(f) for f in e.factors))
    if isinstance(e, Pow):
        return variables(e.base)
    raise TypeError(f"not an expression node: {e!r}")


# --- parsing ---------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<num>\d+(?:\.\d+|/\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*^()])|(?P<ws>\s+)"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, tokens, declared: Optional[frozenset]):
        self.tokens = tokens
        self.i = 0
        self.declared = declared

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.peek()
        if text != value:
            raise ParseError(f"expected {value!r}, found {text or 'end of input'!r}", pos)
        return self.advance()

    def parse(self) -> Expr:
        e = self.sum()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {text!r}", pos)
        return e

    def sum(self) -> Expr:
        terms = [self.term()]
        while self.peek()[1] in ("+", "-"):
            op = self.advance()[1]
            t = self.term()
            terms.append(Neg(t) if op == "-" else t)
        return add(*terms)

    def term(self) -> Expr:
        factors = [self.unary()]
        while self.peek()[1] == "*":
            self.advance()
            factors.append(self.unary())
        return mul(*factors)

    def unary(self) -> Expr:
        if self.peek()[1] == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        exponents = []
        while self.peek()[1] == "^":
            _, _, caret_pos = self.advance()
            exponents.append((self.exponent(), caret_pos))
        if not exponents:
            return base
        # fold a literal tower right-associatively with exact arithmetic
        total, pos = exponents[-1]
        for e, p in reversed(exponents[:-1]):
            try:
                folded = e ** total
            except (ZeroDivisionError, OverflowError):
                raise ParseError("exponent tower does not reduce to a rational", p)
            if not isinstance(folded, Fraction):
                raise ParseError("exponent tower does not reduce to a rational", p)
            total, pos = folded, p
        if total.denominator % 2 == 0:
            raise ParseError(
                f"rational exponent {total} has an even denominator "
                "(not real-valued for negative bases)", pos)
        return Pow(base, total)

    def exponent(self) -> Fraction:
        kind, text, pos = self.peek()
        if text == "(":
            self.advance()
            value = self._signed_number()
            self.expect(")")
            return value
        return self._signed_number()

    def _signed_number(self) -> Fraction:
        sign = 1
        if self.peek()[1] == "-":
            self.advance()
            sign = -1
        kind, text, pos = self.advance()
        if kind != "num":
            raise ParseError(f"expected a numeric exponent, found {text!r}", pos)
        return sign * Fraction(text)

    def atom(self) -> Expr:
        kind, text, pos = self.advance()
        if kind == "num":
            return Const(Fraction(text))
        if kind == "name":
            if self.declared is not None and text not in self.declared:
                raise ParseError(f"undeclared variable {text!r}", pos)
            return Var(text)
        if text == "(":
            e = self.sum()
            self.expect(")")
            return e
        raise ParseError(f"unexpected {text or 'end of input'!r}", pos)


def parse_expr(text: str, variables: Optional[Iterable[str]] = None) -> Expr:
    """Parse ``text`` against the grammar, restricting variable references
    to ``variables`` (None disables the check)."""
    declared = None if variables is None else frozenset(variables)
    return _Parser(_tokenize(text), declared).parse()


# --- evaluation ------------------------------------------------------------

def rational_power(x: float, num: int, den: int) -> float:
    """Sign-preserving real root: sign(x)^num * |x|^(num/den), den odd."""
    r = abs(x) ** (num / den)
    if x < 0 and num % 2 != 0:
        return -r
    return r


def evaluate(e: Expr, binding: Mapping[str, float]) -> float:
    """Evaluate to a float.  Deterministic: identical AST and binding give a
    bit-identical result."""
    if isinstance(e, Var):
        try:
            return float(binding[e.name])
        except KeyError:
            raise EvalError(f"missing binding for variable {e.name!r}") from None
    if isinstance(e, Const):
        return float(e.value)
    if isinstance(e, Neg):
        return -evaluate(e.child, binding)
    if isinstance(e, Sum):
        acc = evaluate(e.terms[0], binding)
        for t in e.terms[1:]:
            acc = acc + evaluate(t, binding)
        return acc
    if isinstance(e, Product):
        acc = evaluate(e.factors[0], binding)
        for f in e.factors[1:]:
            acc = acc * evaluate(f, binding)
        return acc
    if isinstance(e, Pow):
        b = evaluate(e.base, binding)
        if e.exponent.denominator == 1:
            return b ** e.exponent.numerator
        return rational_power(b, e.exponent.numerator, e.exponent.denominator)
    raise TypeError(f"not an expression node: {e!r}")


# --- differentiation -------------------------------------------------------

def differentiate(e: Expr, var: str) -> Expr:
    """Exact symbolic derivative with respect to ``var``.

    The result is not simplified; apply fold_constants() separately.
    """
    if isinstance(e, Var):
        return Const(Fraction(1 if e.name == var else 0))
    if isinstance(e, Const):
        return Const(Fraction(0))
    if isinstance(e, Neg):
        return Neg(differentiate(e.child, var))
    if isinstance(e, Sum):
        return Sum(tuple(differentiate(t, var) for t in e.terms))
    if isinstance(e, Product):
        terms = []
        fs = e.factors
        for i in range(len(fs)):
            terms.append(mul(*fs[:i], differentiate(fs[i], var), *fs[i + 1:]))
        return add(*terms)
    if isinstance(e, Pow):
        if e.exponent == 0:
            return Const(Fraction(0))
        return mul(Const(e.exponent), Pow(e.base, e.exponent - 1),
                   differentiate(e.base, var))
    raise TypeError(f"not an expression node: {e!r}")


# --- constant folding ------------------------------------------------------

def _integer_root(n: int, q: int) -> Optional[int]:
    if n in (0, 1):
        return n
    if n.bit_length() > 512:
        return None
    r = round(n ** (1.0 / q))
    for c in (r - 1, r, r + 1):
        if c >= 0 and c ** q == n:
            return c
    return None


def _exact_rational_pow(value: Fraction, exponent: Fraction) -> Optional[Fraction]:
    num, den = exponent.numerator, exponent.denominator
    if value == 0:
        return Fraction(0) if num > 0 else None
    if den == 1:
        return value ** num
    sign = -1 if (value < 0 and num % 2 != 0) else 1
    a = abs(value)
    rn = _integer_root(a.numerator, den)
    rd = _integer_root(a.denominator, den)
    if rn is None or rd is None:
        return None
    return sign * Fraction(rn, rd) ** num


def fold_constants(e: Expr) -> Expr:
    """Fold constant subexpressions with exact rational arithmetic.

    Evaluation-equivalent to the input; not a canonical form.
    """
    if isinstance(e, (Var, Const)):
        return e
    if isinstance(e, Neg):
        c = fold_constants(e.child)
        if isinstance(c, Const):
            return Const(-c.value)
        if isinstance(c, Neg):
            return c.child
        return Neg(c)
    if isinstance(e, Sum):
        total = Fraction(0)
        rest: list = []
        for t in e.terms:
            ft = fold_constants(t)
            parts = ft.terms if isinstance(ft, Sum) else (ft,)
            for p in parts:
                if isinstance(p, Const):
                    total += p.value
                else:
                    rest.append(p)
        if total != 0:
            rest.append(Const(total))
        return add(*rest)
    if isinstance(e, Product):
        coef = Fraction(1)
        rest = []
        for f in e.factors:
            ff = fold_constants(f)
            if isinstance(ff, Neg):
                coef = -coef
                ff = ff.child
            parts = ff.factors if isinstance(ff, Product) else (ff,)
            for p in parts:
                if isinstance(p, Const):
                    coef *= p.value
                else:
                    rest.append(p)
        if coef == 0:
            return Const(Fraction(0))
        if not rest:
            return Const(coef)
        if coef == 1:
            return mul(*rest)
        if coef == -1:
            return Neg(mul(*rest))
        return mul(Const(coef), *rest)
    if isinstance(e, Pow):
        b = fold_constants(e.base)
        if e.exponent == 0:
            return Const(Fraction(1))
        if e.exponent == 1:
            return b
        if isinstance(b, Const):
            folded = _exact_rational_pow(b.value, e.exponent)
            if folded is not None:
                return Const(folded)
        return Pow(b, e.exponent)
    raise TypeError(f"not an expression node: {e!r}")


# --- printing --------------------------------------------------------------

def _frac_str(v: Fraction) -> str:
    if v.denominator == 1:
        return str(v.numerator)
    return f"{v.numerator}/{v.denominator}"


def to_string(e: Expr) -> str:
    """Render to a string that re-parses to normalize(e)."""
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Const):
        return _frac_str(e.value)
    if isinstance(e, Neg):
        inner = to_string(e.child)
        if isinstance(e.child, (Sum, Product)):
            return f"-({inner})"
        return f"-{inner}"
    if isinstance(e, Sum):
        out = to_string(e.terms[0])
        for t in e.terms[1:]:
            if isinstance(t, Neg):
                inner = to_string(t.child)
                if isinstance(t.child, Sum):
                    inner = f"({inner})"
                out += f" - {inner}"
            else:
                out += f" + {to_string(t)}"
        return out
    if isinstance(e, Product):
        parts = []
        for f in e.factors:
            s = to_string(f)
            if isinstance(f, Sum):
                s = f"({s})"
            parts.append(s)
        return "*".join(parts)
    if isinstance(e, Pow):
        base = to_string(e.base)
        if not (isinstance(e.base, Var)
                or (isinstance(e.base, Const) and e.base.value >= 0)):
            base = f"({base})"
        exp = e.exponent
        if exp.denominator == 1:
            suffix = str(exp.numerator) if exp.numerator >= 0 else f"-{-exp.numerator}"
        else:
            suffix = f"({_frac_str(exp)})" if exp >= 0 else f"(-{_frac_str(-exp)})"
        return f"{base}^{suffix}"
    raise TypeError(f"not an expression node: {e!r}")


def normalize(e: Expr) -> Expr:
    """Structural normal form: flatten nested sums/products, strip vacuous
    wrappers and rewrite negative constants as Neg(positive).  This is the
    shape the parser itself produces, so parse(to_string(e)) == normalize(e).
    """
    if isinstance(e, Var):
        return e
    if isinstance(e, Const):
        if e.value < 0:
            return Neg(Const(-e.value))
        return e
    if isinstance(e, Neg):
        return Neg(normalize(e.child))
    if isinstance(e, Sum):
        return add(*(normalize(t) for t in e.terms))
    if isinstance(e, Product):
        return mul(*(normalize(f) for f in e.factors))
    if isinstance(e, Pow):
        return Pow(normalize(e.base), e.exponent)
    raise TypeError(f"not an expression node: {e!r}")


# --- compilation -----------------------------------------------------------

def _code(e: Expr, index: Mapping[str, int]) -> str:
    if isinstance(e, Var):
        try:
            return f"_x[{index[e.name]}]"
        except KeyError:
            raise ExprError(f"variable {e.name!r} not in compilation scope") from None
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, Neg):
        return f"(-{_code(e.child, index)})"
    if isinstance(e, Sum):
        return "(" + " + ".join(_code(t, index) for t in e.terms) + ")"
    if isinstance(e, Product):
        return "(" + "*".join(_code(f, index) for f in e.factors) + ")"
    if isinstance(e, Pow):
        # parenthesize the base: ** binds tighter than unary minus, and a
        # negative constant renders with a leading sign
        b = _code(e.base, index)
        if e.exponent.denominator == 1:
            return f"(({b})**{e.exponent.numerator})"
        return f"_rp({b}, {e.exponent.numerator}, {e.exponent.denominator})"
    raise TypeError(f"not an expression node: {e!r}")


def compile_exprs(exprs: Sequence[Expr],
                  var_names: Sequence[str]) -> Callable[[np.ndarray], np.ndarray]:
    """Compile a vector of expressions into one fast evaluator.

    The returned callable maps a value vector (ordered like ``var_names``)
    to an ndarray of expression values, with arithmetic identical to
    evaluate() term for term.
    """
    exprs = list(exprs)
    if not exprs:
        empty = np.zeros(0)
        return lambda x: empty.copy()
    index = {n: i for i, n in enumerate(var_names)}
    body = ", ".join(_code(e, index) for e in exprs)
    if len(exprs) == 1:
        body += ","
    src = f"def _f(_x):\n    return ({body})"
    namespace = {"_rp": rational_power}
    exec(compile(src, "<nisyn-expr>", "exec"), namespace)
    f = namespace["_f"]

    def fn(x):
        return np.array(f(x), dtype=float)

    return fn
