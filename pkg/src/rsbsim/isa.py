"""Toy instruction set, assembler and disassembler.

Every instruction occupies exactly one address unit, so the instruction at
index ``k`` of an image lives at ``base + k``.  Code addresses are not backed
by data memory; the data segment of an image is a separate byte array.

Register ``r15`` is the stack pointer used implicitly by push/pop/call/ret.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

DEFAULT_ORG = 0x1000
DEFAULT_DATA_BASE = 0x8000
SP = 15
WORD_MASK = (1 << 64) - 1


class AsmError(ValueError):
    """Assembly failure carrying the 1-based line/column of the offending token."""

    def __init__(self, message: str, line: int, col: int = 1):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Reg:
    n: int


@dataclass(frozen=True)
class Imm:
    value: int


@dataclass(frozen=True)
class Ref:
    """Symbolic reference; ``addr`` is the resolved value."""

    name: Optional[str]
    addr: int


@dataclass(frozen=True)
class Mem:
    """``[base + sym + offset]``; ``disp`` already includes the symbol value."""

    base: Optional[int]
    disp: int
    sym: Optional[str] = None


Operand = Union[Reg, Imm, Ref, Mem]

# operand kinds: R register, V value (imm or ref), M memory, L label ref
SIGNATURES: dict[str, tuple[tuple[str, ...], ...]] = {
    "mov": (("R", "R"), ("R", "V")),
    "load": (("R", "M"),),
    "store": (("M", "R"), ("M", "V")),
    "add": (("R", "R"), ("R", "V")),
    "sub": (("R", "R"), ("R", "V")),
    "and": (("R", "R"), ("R", "V")),
    "shl": (("R", "R"), ("R", "V")),
    "cmp": (("R", "R"), ("R", "V")),
    "jz": (("L",),),
    "jnz": (("L",),),
    "jmp": (("L",), ("R",)),
    "call": (("L",), ("R",)),
    "ret": ((),),
    "push": (("R",), ("V",)),
    "pop": (("R",),),
    "clflush": (("M",),),
    "rdtscp": (("R",),),
    "lfence": ((),),
    "cpuid": ((),),
    "syscall": (("V",),),
    "sysret": ((),),
    "eenter": (("L",),),
    "eexit": ((),),
    "yield": ((),),
    "halt": ((),),
    "nop": ((),),
}
MNEMONICS = tuple(SIGNATURES)
COND_BRANCHES = frozenset({"jz", "jnz"})


@dataclass(frozen=True)
class Instruction:
    opcode: str
    operands: tuple = ()
    source_span: tuple[int, int] = field(default=(0, 0), compare=False)

    @property
    def is_indirect(self) -> bool:
        return self.opcode in ("jmp", "call") and isinstance(self.operands[0], Reg)

    def target(self) -> Optional[int]:
        """Static target of a direct jump/call/branch/eenter, else None."""
        if self.opcode in ("jz", "jnz", "jmp", "call", "eenter"):
            op = self.operands[0]
            if isinstance(op, Ref):
                return op.addr
        return None


@dataclass(frozen=True)
class ProgramImage:
    instructions: tuple[Instruction, ...]
    labels: dict  # text label -> address
    base: int = DEFAULT_ORG
    entry: int = DEFAULT_ORG
    data_base: int = DEFAULT_DATA_BASE
    data: bytes = b""
    data_labels: dict = field(default_factory=dict)
    symbols: dict = field(default_factory=dict)  # .equ constants / externals

    def __len__(self) -> int:
        return len(self.instructions)

    @property
    def end(self) -> int:
        return self.base + len(self.instructions)

    def address_of(self, label: str) -> int:
        if label in self.labels:
            return self.labels[label]
        if label in self.data_labels:
            return self.data_labels[label]
        return self.symbols[label]

    def at(self, addr: int) -> Instruction:
        return self.instructions[addr - self.base]

    def relocated(self, new_base: int) -> "ProgramImage":
        """Copy of the image with its text moved to ``new_base``."""
        delta = new_base - self.base
        labels = {k: v + delta for k, v in self.labels.items()}
        insts = tuple(_remap_instr(i, labels, lambda a: a + delta) for i in self.instructions)
        return ProgramImage(insts, labels, new_base, self.entry + delta, self.data_base,
                            self.data, dict(self.data_labels), dict(self.symbols))


def _remap_instr(instr: Instruction, labels: dict, shift) -> Instruction:
    ops = []
    changed = False
    for op in instr.operands:
        if isinstance(op, Ref) and op.name in labels:
            op = Ref(op.name, labels[op.name])
            changed = True
        elif isinstance(op, Ref) and op.name is None:
            op = Ref(None, shift(op.addr))
            changed = True
        ops.append(op)
    if not changed:
        return instr
    return Instruction(instr.opcode, tuple(ops), instr.source_span)


# ---------------------------------------------------------------------------
# assembler

_NUM = re.compile(r"^[+-]?(0[xX][0-9a-fA-F_]+|\d[\d_]*)$")
_IDENT = re.compile(r"^[A-Za-z_.$][\w.$]*$")
_REG = re.compile(r"^[rR](\d+)$")


def _parse_int(tok: str) -> Optional[int]:
    if _NUM.match(tok):
        return int(tok.replace("_", ""), 0)
    return None


@dataclass
class _Pending:
    opcode: str
    raw: list  # (text, col)
    line: int
    col: int


def assemble(source_text: str) -> ProgramImage:
    """Assemble ``source_text`` into a :class:`ProgramImage`.

    Two passes: the first assigns addresses and collects labels, the second
    parses operands and resolves references.  Every error is an
    :class:`AsmError` with a source position.
    """
    org: Optional[int] = None
    data_base = DEFAULT_DATA_BASE
    data = bytearray()
    data_labels: dict[str, int] = {}
    symbols: dict[str, int] = {}
    labels: dict[str, int] = {}
    label_lines: dict[str, int] = {}
    pending: list[_Pending] = []
    entry_name: Optional[tuple[str, int, int]] = None
    data_items: list[tuple[str, list, int, int]] = []
    section = "text"

    def declare(name: str, lineno: int, col: int) -> None:
        if name in labels or name in data_labels or name in symbols:
            raise AsmError(f"duplicate label {name!r}", lineno, col)
        if _REG.match(name) or name.lower() in SIGNATURES:
            raise AsmError(f"reserved name {name!r}", lineno, col)

    for lineno, raw_line in enumerate(source_text.splitlines(), start=1):
        line = raw_line.split(";", 1)[0]
        stripped = line.strip()
        if not stripped:
            continue
        col = len(line) - len(line.lstrip()) + 1
        # labels (possibly several) at line start
        while True:
            m = re.match(r"^([A-Za-z_.$][\w.$]*)\s*:", stripped)
            if not m or m.group(1).startswith(".") and m.group(1)[1:] in (
                    "data", "text", "org", "entry", "equ", "byte", "quad", "zero"):
                break
            name = m.group(1)
            declare(name, lineno, col)
            if section == "text":
                labels[name] = len(pending)  # index for now
            else:
                data_labels[name] = len(data_items)
            label_lines[name] = lineno
            consumed = m.end()
            col += consumed + (len(stripped[consumed:]) - len(stripped[consumed:].lstrip()))
            stripped = stripped[consumed:].strip()
            if not stripped:
                break
        if not stripped:
            continue

        head, _, rest = stripped.partition(" ")
        rest = rest.strip()
        args = _split_operands(rest, col + len(head) + 1, lineno) if rest else []
        lhead = head.lower()
        if lhead.startswith("."):
            if lhead == ".text":
                section = "text"
            elif lhead == ".data":
                section = "data"
                if args:
                    data_base = _const(args[0], symbols, lineno)
            elif lhead == ".org":
                if len(args) != 1:
                    raise AsmError(".org takes one argument", lineno, col)
                if pending:
                    raise AsmError(".org must precede all instructions", lineno, col)
                org = _const(args[0], symbols, lineno)
            elif lhead == ".entry":
                if len(args) != 1:
                    raise AsmError(".entry takes one label", lineno, col)
                entry_name = (args[0][0], lineno, args[0][1])
            elif lhead == ".equ":
                parts = rest.replace(",", " ").split()
                if len(parts) != 2:
                    raise AsmError(".equ takes a name and a value", lineno, col)
                name = parts[0]
                if not _IDENT.match(name):
                    raise AsmError(f"bad symbol name {name!r}", lineno, col)
                declare(name, lineno, col)
                symbols[name] = _const((parts[1], col), symbols, lineno)
            elif lhead in (".byte", ".quad", ".zero"):
                if section != "data":
                    raise AsmError(f"{lhead} outside .data", lineno, col)
                if not args:
                    raise AsmError(f"{lhead} needs arguments", lineno, col)
                data_items.append((lhead, args, lineno, col))
            else:
                raise AsmError(f"unknown directive {head!r}", lineno, col)
            continue
        if section != "text":
            raise AsmError("instruction in .data section", lineno, col)
        if lhead not in SIGNATURES:
            raise AsmError(f"unknown mnemonic {head!r}", lineno, col)
        pending.append(_Pending(lhead, args, lineno, col))

    base = DEFAULT_ORG if org is None else org
    labels = {k: base + v for k, v in labels.items()}

    # lay out data
    offsets = []
    for kind, args, lineno, col in data_items:
        offsets.append(len(data))
        for tok, tcol in args:
            if kind == ".zero":
                n = _const((tok, tcol), symbols, lineno)
                if n < 0:
                    raise AsmError(".zero count must be non-negative", lineno, tcol)
                data.extend(bytes(n))
            else:
                v = _const((tok, tcol), symbols, lineno)
                if kind == ".byte":
                    if not -128 <= v <= 255:
                        raise AsmError(f"byte value out of range: {v}", lineno, tcol)
                    data.append(v & 0xFF)
                else:
                    data.extend((v & WORD_MASK).to_bytes(8, "little"))
    offsets.append(len(data))
    data_labels = {k: data_base + offsets[v] for k, v in data_labels.items()}

    def lookup(name: str, lineno: int, col: int) -> int:
        for table in (labels, data_labels, symbols):
            if name in table:
                return table[name]
        raise AsmError(f"undefined label {name!r}", lineno, col)

    instructions = []
    for p in pending:
        ops = tuple(_parse_operand(tok, tcol, p.line, lookup) for tok, tcol in p.raw)
        kinds = tuple(_kind(op) for op in ops)
        if not _matches(p.opcode, kinds):
            raise AsmError(
                f"{p.opcode}: operands ({', '.join(kinds) or 'none'}) do not match "
                f"{_describe(p.opcode)}", p.line, p.col)
        if p.opcode in ("jz", "jnz", "jmp", "call", "eenter") and isinstance(ops[0], Ref):
            if ops[0].name in data_labels:
                raise AsmError(f"branch target {ops[0].name!r} is a data label", p.line, p.col)
            if ops[0].name in labels and not base <= ops[0].addr < base + len(pending):
                raise AsmError(f"branch target {ops[0].name!r} outside image", p.line, p.col)
        instructions.append(Instruction(p.opcode, ops, (p.line, p.col)))

    for name, addr in labels.items():
        if addr > base + len(pending):
            raise AsmError(f"label {name!r} past end of text", label_lines[name])

    if entry_name is not None:
        ename, eline, ecol = entry_name
        if ename in labels:
            entry = labels[ename]
        elif ename in symbols:
            entry = symbols[ename]
        else:
            raise AsmError(f"undefined label {ename!r}", eline, ecol)
    else:
        entry = base
    return ProgramImage(tuple(instructions), labels, base, entry, data_base, bytes(data),
                        data_labels, symbols)


def _split_operands(text: str, col: int, lineno: int) -> list[tuple[str, int]]:
    out = []
    depth = 0
    start = 0
    for i, ch in enumerate(text + ","):
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            tok = text[start:i]
            lead = len(tok) - len(tok.lstrip())
            tok = tok.strip()
            if not tok:
                raise AsmError("empty operand", lineno, col + start)
            out.append((tok, col + start + lead))
            start = i + 1
    if depth != 0:
        raise AsmError("unbalanced brackets", lineno, col)
    return out


def _const(arg: tuple[str, int], symbols: dict, lineno: int) -> int:
    tok, col = arg
    v = _parse_int(tok)
    if v is not None:
        return v
    if tok in symbols:
        return symbols[tok]
    raise AsmError(f"expected a constant, got {tok!r}", lineno, col)


def _parse_operand(tok: str, col: int, lineno: int, lookup) -> Operand:
    m = _REG.match(tok)
    if m:
        n = int(m.group(1))
        if n > 15:
            raise AsmError(f"no such register {tok!r}", lineno, col)
        return Reg(n)
    if tok.startswith("["):
        if not tok.endswith("]"):
            raise AsmError(f"malformed memory operand {tok!r}", lineno, col)
        return _parse_mem(tok[1:-1], col, lineno, lookup)
    v = _parse_int(tok)
    if v is not None:
        return Imm(v)
    if _IDENT.match(tok):
        return Ref(tok, lookup(tok, lineno, col))
    raise AsmError(f"malformed operand {tok!r}", lineno, col)


def _parse_mem(body: str, col: int, lineno: int, lookup) -> Mem:
    terms = re.findall(r"\s*([+-]?)\s*([^\s+-]+)", body)
    if not terms or "".join(s + t for s, t in terms).replace(" ", "") != body.replace(" ", ""):
        raise AsmError(f"malformed memory operand [{body}]", lineno, col)
    base = None
    disp = 0
    sym = None
    for i, (sign, term) in enumerate(terms):
        m = _REG.match(term)
        if m:
            if i != 0 or sign:
                raise AsmError("base register must come first", lineno, col)
            base = int(m.group(1))
            if base > 15:
                raise AsmError(f"no such register {term!r}", lineno, col)
            continue
        if i > 0 and not sign:
            raise AsmError(f"malformed memory operand [{body}]", lineno, col)
        v = _parse_int(term)
        if v is None:
            if not _IDENT.match(term):
                raise AsmError(f"malformed memory term {term!r}", lineno, col)
            if sym is not None or sign == "-":
                raise AsmError("at most one added symbol per memory operand", lineno, col)
            sym = term
            v = lookup(term, lineno, col)
        disp += -v if sign == "-" else v
    return Mem(base, disp, sym)


def _kind(op: Operand) -> str:
    if isinstance(op, Reg):
        return "R"
    if isinstance(op, Mem):
        return "M"
    if isinstance(op, Ref):
        return "L"
    return "V"


def _matches(opcode: str, kinds: tuple[str, ...]) -> bool:
    for sig in SIGNATURES[opcode]:
        if len(sig) != len(kinds):
            continue
        # a label reference is also acceptable wherever a value is
        if all(k == s or (s == "V" and k == "L") for k, s in zip(kinds, sig)):
            return True
    return False


def _describe(opcode: str) -> str:
    names = {"R": "reg", "V": "imm", "M": "mem", "L": "label"}
    forms = [", ".join(names[k] for k in sig) or "no operands" for sig in SIGNATURES[opcode]]
    return " | ".join(forms)


# ---------------------------------------------------------------------------
# disassembler

def _fmt_num(v: int) -> str:
    if v < 0:
        return f"-{-v:#x}"
    return str(v) if v < 10 else f"{v:#x}"


def _fmt_operand(op: Operand, image: ProgramImage) -> str:
    if isinstance(op, Reg):
        return f"r{op.n}"
    if isinstance(op, Imm):
        return _fmt_num(op.value)
    if isinstance(op, Ref):
        return op.name if op.name is not None else f"L_{op.addr:x}"
    parts = []
    if op.base is not None:
        parts.append(f"r{op.base}")
    rest = op.disp
    if op.sym is not None:
        parts.append(op.sym)
        rest -= image.address_of(op.sym)
    if rest or not parts:
        parts.append(_fmt_num(rest))
    text = parts[0]
    for p in parts[1:]:
        text += p if p.startswith("-") else "+" + p
    return f"[{text}]"


def disassemble(image: ProgramImage) -> str:
    """Render ``image`` as re-assemblable source text."""
    out = [f".org {image.base:#x}"]
    for name, value in image.symbols.items():
        out.append(f".equ {name} {_fmt_num(value)}")
    by_addr: dict[int, list[str]] = {}
    for name, addr in image.labels.items():
        by_addr.setdefault(addr, []).append(name)
    # anonymous references get synthesized labels
    for instr in image.instructions:
        for op in instr.operands:
            if isinstance(op, Ref) and op.name is None:
                by_addr.setdefault(op.addr, [])
                name = f"L_{op.addr:x}"
                if name not in by_addr[op.addr]:
                    by_addr[op.addr].append(name)
    entry_names = by_addr.get(image.entry)
    if entry_names:
        out.append(f".entry {entry_names[0]}")
    elif image.entry != image.base:
        sym = next((k for k, v in image.symbols.items() if v == image.entry), None)
        if sym is None:
            sym = f"L_{image.entry:x}"
            by_addr.setdefault(image.entry, []).append(sym)
        out.append(f".entry {sym}")
    out.append(".text")
    for k, instr in enumerate(image.instructions):
        addr = image.base + k
        for name in by_addr.get(addr, []):
            out.append(f"{name}:")
        ops = ", ".join(_fmt_operand(op, image) for op in instr.operands)
        out.append(f"    {instr.opcode} {ops}".rstrip())
    for name in by_addr.get(image.end, []):
        out.append(f"{name}:")
    if image.data or image.data_labels or image.data_base != DEFAULT_DATA_BASE:
        out.append(f".data {image.data_base:#x}")
        dl: dict[int, list[str]] = {}
        for name, addr in image.data_labels.items():
            dl.setdefault(addr - image.data_base, []).append(name)
        cuts = sorted(set(dl) | set(range(0, len(image.data), 16)) | {len(image.data)})
        for a, b in zip(cuts, cuts[1:] + [None]):
            for name in dl.get(a, []):
                out.append(f"{name}:")
            if b is not None and b > a:
                chunk = image.data[a:b]
                out.append("    .byte " + ", ".join(str(x) for x in chunk))
    return "\n".join(out) + "\n"
