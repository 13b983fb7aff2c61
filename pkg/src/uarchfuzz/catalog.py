"""Instruction catalog: sets -> instructions -> operand slots.

The catalog is the substrate of the hierarchical action space. An action
picks a set index, an instruction index, and up to seven operand indices;
out-of-range instruction/operand indices wrap with a modulo so every
in-bounds index tuple decodes to a runnable instruction. Catalogs are
immutable after load and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ActionDecodeError, CatalogSchemaError, EmptyCatalogError

MAX_OPERAND_SLOTS = 7


class OperandKind(str, Enum):
    REGISTER = "register"
    MEMORY = "memory"
    IMMEDIATE = "immediate"


class RegClass(str, Enum):
    GPR = "GPR"
    X87 = "x87"
    MMX = "MMX"
    XMM = "XMM"
    YMM = "YMM"
    ZMM = "ZMM"
    K = "K"
    SEG = "SEG"


# Fixed operand candidate pools. Memory operands are pinned to a single
# safe base register (R15 points at a mapped scratch buffer in every
# harness), so each memory slot has exactly one candidate.
GPR64_POOL = ("RAX", "RBX", "RCX", "RDX", "RSI", "RDI", "R8", "R9")
GPR32_POOL = ("EAX", "EBX", "ECX", "EDX", "ESI", "EDI", "R8D", "R9D")
GPR16_POOL = ("AX", "BX", "CX", "DX", "SI", "DI", "R8W", "R9W")
XMM_POOL = ("XMM0", "XMM1", "XMM2", "XMM3", "XMM4", "XMM5", "XMM6", "XMM7")
YMM_POOL = ("YMM0", "YMM1", "YMM2", "YMM3", "YMM4", "YMM5", "YMM6", "YMM7")
ZMM_POOL = ("ZMM0", "ZMM1", "ZMM2", "ZMM3", "ZMM4", "ZMM5", "ZMM6", "ZMM7")
MMX_POOL = ("MM0", "MM1", "MM2", "MM3", "MM4", "MM5", "MM6", "MM7")
ST_POOL = ("ST0", "ST1", "ST2", "ST3", "ST4", "ST5", "ST6", "ST7")
K_POOL = ("K0", "K1", "K2", "K3", "K4", "K5", "K6", "K7")
IMM_POOL = ("0", "1", "2", "10")


@dataclass(frozen=True)
class OperandSlot:
    kind: OperandKind
    candidates: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.candidates:
            raise CatalogSchemaError("operand slot has no candidates")
        if self.kind is OperandKind.MEMORY and len(self.candidates) != 1:
            raise CatalogSchemaError(
                "memory slot must have exactly one canonical candidate, "
                f"got {list(self.candidates)}"
            )


@dataclass(frozen=True)
class InstructionSpec:
    mnemonic: str
    set_name: str
    operand_slots: tuple[OperandSlot, ...] = ()
    register_types: frozenset[RegClass] = frozenset()

    def __post_init__(self) -> None:
        if not self.mnemonic:
            raise CatalogSchemaError("instruction with empty mnemonic")
        if len(self.operand_slots) > MAX_OPERAND_SLOTS:
            raise CatalogSchemaError(
                f"{self.mnemonic}: {len(self.operand_slots)} operand slots "
                f"exceeds the maximum of {MAX_OPERAND_SLOTS}"
            )


@dataclass(frozen=True)
class InstructionSet:
    name: str
    instructions: tuple[InstructionSpec, ...]

    def __post_init__(self) -> None:
        if not self.instructions:
            raise CatalogSchemaError(f"set '{self.name}' has no instructions")


@dataclass(frozen=True)
class ConcreteInstruction:
    """A fully resolved instruction: mnemonic plus rendered operand texts."""

    mnemonic: str
    set_name: str
    operands: tuple[str, ...]
    register_types: frozenset[RegClass] = frozenset()


@dataclass(frozen=True)
class ActionSpaceShape:
    """Per-head categorical sizes: set head, instruction head, 7 operand heads."""

    n_sets: int
    max_set_size: int
    operand_head_size: int

    @property
    def head_sizes(self) -> tuple[int, ...]:
        return (self.n_sets, self.max_set_size) + (self.operand_head_size,) * MAX_OPERAND_SLOTS


@dataclass(frozen=True)
class Catalog:
    sets: tuple[InstructionSet, ...]
    denylist: tuple[str, ...] = ()
    max_set_size: int = field(init=False, default=0)
    max_operand_candidates: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        if not self.sets:
            raise EmptyCatalogError("catalog has no instruction sets")
        object.__setattr__(
            self, "max_set_size", max(len(s.instructions) for s in self.sets)
        )
        cands = [
            len(slot.candidates)
            for s in self.sets
            for ins in s.instructions
            for slot in ins.operand_slots
        ]
        object.__setattr__(self, "max_operand_candidates", max(cands, default=0))

    @property
    def n_instructions(self) -> int:
        return sum(len(s.instructions) for s in self.sets)

    def set_names(self) -> list[str]:
        return [s.name for s in self.sets]

    def mnemonics(self) -> set[str]:
        return {i.mnemonic for s in self.sets for i in s.instructions}


def action_space_shape(catalog: Catalog) -> ActionSpaceShape:
    """Head sizes the agent samples from; degenerate heads collapse to size 1."""
    return ActionSpaceShape(
        n_sets=len(catalog.sets),
        max_set_size=catalog.max_set_size,
        operand_head_size=max(1, catalog.max_operand_candidates),
    )


def resolve(
    catalog: Catalog,
    set_idx: int,
    instr_idx: int,
    operand_idxs: Sequence[int],
) -> ConcreteInstruction:
    """Decode one hierarchical action into a concrete instruction.

    The set index must be in range; instruction and operand indices wrap
    modulo the actual set size / candidate count, so any index tuple inside
    the action-space bounds is valid. Operand indices beyond the chosen
    instruction's slot count are ignored.
    """
    shape = action_space_shape(catalog)
    if not 0 <= set_idx < shape.n_sets:
        raise ActionDecodeError(f"set index {set_idx} outside [0, {shape.n_sets})")
    if not 0 <= instr_idx < shape.max_set_size:
        raise ActionDecodeError(
            f"instruction index {instr_idx} outside [0, {shape.max_set_size})"
        )
    if len(operand_idxs) != MAX_OPERAND_SLOTS:
        raise ActionDecodeError(
            f"expected {MAX_OPERAND_SLOTS} operand indices, got {len(operand_idxs)}"
        )
    for k, idx in enumerate(operand_idxs):
        if not 0 <= idx < shape.operand_head_size:
            raise ActionDecodeError(
                f"operand index {idx} in slot {k} outside [0, {shape.operand_head_size})"
            )

    iset = catalog.sets[set_idx]
    spec = iset.instructions[instr_idx % len(iset.instructions)]
    operands = tuple(
        slot.candidates[operand_idxs[k] % len(slot.candidates)]
        for k, slot in enumerate(spec.operand_slots)
    )
    return ConcreteInstruction(
        mnemonic=spec.mnemonic,
        set_name=iset.name,
        operands=operands,
        register_types=spec.register_types,
    )


def render_asm(instr: ConcreteInstruction) -> str:
    """Single assembly line, operands comma-separated in slot order."""
    if not instr.operands:
        return instr.mnemonic
    return f"{instr.mnemonic} {', '.join(instr.operands)}"


def filter_denylist(catalog: Catalog, denylist: Iterable[str]) -> Catalog:
    """Drop denylisted mnemonics; sets that become empty are removed.

    Matching is case-insensitive. Filtering is idempotent and an empty
    result is allowed (callers should treat it as a warning condition).
    """
    deny = {m.strip().upper() for m in denylist if m.strip()}
    if not deny:
        return catalog
    kept_sets = []
    for iset in catalog.sets:
        kept = tuple(i for i in iset.instructions if i.mnemonic.upper() not in deny)
        if kept:
            kept_sets.append(InstructionSet(name=iset.name, instructions=kept))
    if not kept_sets:
        raise EmptyCatalogError("denylist removed every instruction")
    return Catalog(sets=tuple(kept_sets), denylist=tuple(sorted(deny)))


# ---------------------------------------------------------------------------
# Serialization. Schema: top-level array of sets, each
#   {"name": ..., "instructions": [
#       {"mnemonic": ..., "operands": [{"kind": ..., "candidates": [...]}],
#        "regtypes": [...]}]}
# ---------------------------------------------------------------------------

def _slot_from_json(obj: dict, where: str) -> OperandSlot:
    try:
        kind = OperandKind(obj["kind"])
        candidates = tuple(str(c) for c in obj["candidates"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CatalogSchemaError(f"{where}: bad operand slot: {exc}") from exc
    return OperandSlot(kind=kind, candidates=candidates)


def _instr_from_json(obj: dict, set_name: str, where: str) -> InstructionSpec:
    try:
        mnemonic = str(obj["mnemonic"])
        slots = tuple(
            _slot_from_json(s, f"{where} operand {k}")
            for k, s in enumerate(obj.get("operands", []))
        )
        regtypes = frozenset(RegClass(r) for r in obj.get("regtypes", []))
    except (KeyError, ValueError, TypeError) as exc:
        raise CatalogSchemaError(f"{where}: {exc}") from exc
    return InstructionSpec(
        mnemonic=mnemonic, set_name=set_name, operand_slots=slots, register_types=regtypes
    )


def catalog_from_json(data: object) -> Catalog:
    if not isinstance(data, list):
        raise CatalogSchemaError("top level must be an array of sets")
    sets = []
    for si, sobj in enumerate(data):
        if not isinstance(sobj, dict) or "name" not in sobj:
            raise CatalogSchemaError(f"set {si}: expected object with 'name'")
        name = str(sobj["name"])
        instrs = sobj.get("instructions", [])
        if not isinstance(instrs, list):
            raise CatalogSchemaError(f"set {si} ('{name}'): 'instructions' must be an array")
        specs = tuple(
            _instr_from_json(iobj, name, f"set {si} ('{name}') instruction {ii}")
            for ii, iobj in enumerate(instrs)
        )
        if not specs:
            raise CatalogSchemaError(f"set {si} ('{name}') has no instructions")
        sets.append(InstructionSet(name=name, instructions=specs))
    if not sets:
        raise EmptyCatalogError("catalog file contains zero sets")
    return Catalog(sets=tuple(sets))


def catalog_to_json(catalog: Catalog) -> list:
    return [
        {
            "name": s.name,
            "instructions": [
                {
                    "mnemonic": i.mnemonic,
                    "operands": [
                        {"kind": slot.kind.value, "candidates": list(slot.candidates)}
                        for slot in i.operand_slots
                    ],
                    "regtypes": sorted(r.value for r in i.register_types),
                }
                for i in s.instructions
            ],
        }
        for s in catalog.sets
    ]


def load_catalog(path: str | Path) -> Catalog:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CatalogSchemaError(f"cannot read catalog {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CatalogSchemaError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return catalog_from_json(data)


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    Path(path).write_text(dumps_catalog(catalog))


def dumps_catalog(catalog: Catalog) -> str:
    # Stable formatting so save->load->save round-trips byte-identically.
    return json.dumps(catalog_to_json(catalog), indent=1, sort_keys=False) + "\n"


def load_denylist(path: str | Path) -> list[str]:
    """Newline-separated mnemonics; '#' starts a comment."""
    entries = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            entries.append(line)
    return entries


def parse_sequence(catalog: Catalog, lines: Iterable[str]) -> list[ConcreteInstruction]:
    """Parse assembly text lines against the catalog's mnemonics.

    Mnemonics may span two tokens (e.g. a LOCK-prefixed form); the longest
    known prefix wins. Operand texts are kept verbatim.
    """
    by_mnemonic: dict[str, InstructionSpec] = {}
    for s in catalog.sets:
        for i in s.instructions:
            by_mnemonic.setdefault(i.mnemonic.upper(), i)

    out = []
    for ln, raw in enumerate(lines, start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        tokens = line.split(None, 2)
        spec = None
        rest = ""
        two_word = " ".join(tokens[:2]).upper() if len(tokens) >= 2 else None
        if two_word and two_word in by_mnemonic:
            spec = by_mnemonic[two_word]
            rest = tokens[2] if len(tokens) > 2 else ""
        elif tokens[0].upper() in by_mnemonic:
            spec = by_mnemonic[tokens[0].upper()]
            rest = line[len(tokens[0]):].strip()
        if spec is None:
            raise CatalogSchemaError(
                f"line {ln}: unknown mnemonic in {line!r} (not in catalog)"
            )
        operands = tuple(op.strip() for op in rest.split(",")) if rest else ()
        out.append(
            ConcreteInstruction(
                mnemonic=spec.mnemonic,
                set_name=spec.set_name,
                operands=operands,
                register_types=spec.register_types,
            )
        )
    return out


def convert_tabular(path: str | Path) -> Catalog:
    """Build a catalog from a simple tab-separated export.

    Columns: set name, mnemonic, operand spec, regtypes. The operand spec
    is a space-separated list of slot selectors: a register-class name
    (GPR64, GPR32, GPR16, XMM, YMM, ZMM, MMX, ST, K), ``mem[:size]`` for
    the canonical R15 memory form, or ``imm``. Regtypes are comma-separated
    RegClass names. Lines starting with '#' are skipped.
    """
    pools = {
        "GPR64": (OperandKind.REGISTER, GPR64_POOL),
        "GPR32": (OperandKind.REGISTER, GPR32_POOL),
        "GPR16": (OperandKind.REGISTER, GPR16_POOL),
        "XMM": (OperandKind.REGISTER, XMM_POOL),
        "YMM": (OperandKind.REGISTER, YMM_POOL),
        "ZMM": (OperandKind.REGISTER, ZMM_POOL),
        "MMX": (OperandKind.REGISTER, MMX_POOL),
        "ST": (OperandKind.REGISTER, ST_POOL),
        "K": (OperandKind.REGISTER, K_POOL),
    }
    sets: dict[str, list[InstructionSpec]] = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise CatalogSchemaError(f"line {ln}: expected at least set and mnemonic")
        set_name, mnemonic = parts[0].strip(), parts[1].strip()
        opspec = parts[2].strip() if len(parts) > 2 else ""
        regspec = parts[3].strip() if len(parts) > 3 else ""
        slots = []
        for sel in opspec.split():
            if sel == "imm":
                slots.append(OperandSlot(OperandKind.IMMEDIATE, IMM_POOL))
            elif sel.startswith("mem"):
                size = sel.split(":", 1)[1] if ":" in sel else ""
                text = f"{size} [R15]".strip()
                slots.append(OperandSlot(OperandKind.MEMORY, (text,)))
            elif sel in pools:
                kind, pool = pools[sel]
                slots.append(OperandSlot(kind, pool))
            else:
                raise CatalogSchemaError(f"line {ln}: unknown operand selector {sel!r}")
        try:
            regtypes = frozenset(
                RegClass(r.strip()) for r in regspec.split(",") if r.strip()
            )
        except ValueError as exc:
            raise CatalogSchemaError(f"line {ln}: {exc}") from exc
        sets.setdefault(set_name, []).append(
            InstructionSpec(
                mnemonic=mnemonic,
                set_name=set_name,
                operand_slots=tuple(slots),
                register_types=regtypes,
            )
        )
    if not sets:
        raise EmptyCatalogError(f"{path}: no instructions found")
    return Catalog(
        sets=tuple(
            InstructionSet(name=n, instructions=tuple(instrs))
            for n, instrs in sets.items()
        )
    )
