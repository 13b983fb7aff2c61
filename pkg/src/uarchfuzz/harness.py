"""Assembly harness emission.

Two template families, both standalone NASM elf64 programs:

* counter harness: prologue saves the GPRs, points R15 at a scratch
  buffer, repeats the sequence body, restores and exits. Performance
  events are read around the whole process by the runner.
* leak harness: per encoded symbol position, flush the probe array, run
  the repeated sequence body, run a register-type-specific comparison,
  optionally an LFENCE, then a conditional branch over a transient
  encode gadget (secret byte -> shift left 10 -> touch probe slot), and
  finally time every probe slot. The timing matrix goes to stdout as
  little-endian u64s, positions x slots, row-major.

Emission is deterministic: identical inputs give byte-identical text.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .catalog import ConcreteInstruction, RegClass, render_asm
from .errors import ConfigError, ContractViolation

PROBE_STRIDE = 1024
SCRATCH_BYTES = 8192

# Callee-visible GPRs preserved around the measured region (RSP excluded:
# the stack itself is the save area).
SAVED_GPRS = (
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)

BODY_BEGIN = "; seq body begin"
BODY_END = "; seq body end"


class BranchKind(str, Enum):
    JE = "JE"
    JNE = "JNE"


@dataclass(frozen=True)
class ComparisonSpec:
    """Flag-setting lines specific to one register class."""

    reg_class: RegClass
    lines: tuple[str, ...]


# One comparison per register class, iterated in this fixed order.
COMPARISON_ORDER = (
    RegClass.GPR, RegClass.X87, RegClass.MMX, RegClass.XMM,
    RegClass.YMM, RegClass.ZMM, RegClass.K, RegClass.SEG,
)

COMPARISONS: dict[RegClass, ComparisonSpec] = {
    RegClass.GPR: ComparisonSpec(RegClass.GPR, ("CMP R8, R9",)),
    RegClass.X87: ComparisonSpec(RegClass.X87, ("FCOMI ST0, ST1",)),
    RegClass.MMX: ComparisonSpec(
        RegClass.MMX, ("PCMPEQB MM0, MM1", "MOVD EAX, MM0", "TEST EAX, EAX")
    ),
    RegClass.XMM: ComparisonSpec(RegClass.XMM, ("UCOMISD XMM0, XMM1",)),
    RegClass.YMM: ComparisonSpec(RegClass.YMM, ("VPTEST YMM0, YMM1",)),
    RegClass.ZMM: ComparisonSpec(
        RegClass.ZMM, ("VPCMPEQB K1, ZMM0, ZMM1", "KORTESTQ K1, K1")
    ),
    RegClass.K: ComparisonSpec(RegClass.K, ("KORTESTW K0, K1",)),
    RegClass.SEG: ComparisonSpec(RegClass.SEG, ("VERR AX",)),
}


def select_comparisons(regtypes) -> tuple[ComparisonSpec, ...]:
    """One comparison per register class present; the protocol repeats
    once per entry. No register types at all falls back to GPR."""
    if not regtypes:
        return (COMPARISONS[RegClass.GPR],)
    classes = set()
    for rt in regtypes:
        if not isinstance(rt, RegClass):
            try:
                rt = RegClass(rt)
            except ValueError:
                raise ConfigError(f"unknown register type {rt!r}") from None
        classes.add(rt)
    return tuple(COMPARISONS[c] for c in COMPARISON_ORDER if c in classes)


def sequence_register_types(seq: Sequence[ConcreteInstruction]) -> frozenset:
    out = set()
    for instr in seq:
        out |= instr.register_types
    return frozenset(out)


@dataclass(frozen=True)
class AsmHarness:
    kind: str  # "counter" | "leak"
    text: str
    body: str
    rep_count: int
    branch_kind: Optional[BranchKind] = None
    fence: bool = False
    granularity: Optional[int] = None


def _body_block(seq: Sequence[ConcreteInstruction], rep_symbol: str) -> list[str]:
    lines = [BODY_BEGIN, f"%rep {rep_symbol}"]
    lines += [f"    {render_asm(i)}" for i in seq]
    lines += ["%endrep", BODY_END]
    return lines


def _prologue() -> list[str]:
    lines = ["_start:"]
    lines += [f"    push {r}" for r in SAVED_GPRS]
    lines.append("    lea r15, [rel scratch]")
    return lines


def _epilogue_exit() -> list[str]:
    lines = [f"    pop {r}" for r in reversed(SAVED_GPRS)]
    lines += ["    mov rax, 60", "    xor rdi, rdi", "    syscall"]
    return lines


def emit_counter_harness(seq: Sequence[ConcreteInstruction], repeats: int) -> AsmHarness:
    """Minimal harness around the repeated sequence for counter runs."""
    if not seq:
        raise ContractViolation("cannot emit a counter harness for an empty sequence")
    if repeats < 1:
        raise ContractViolation(f"repeat count must be >= 1, got {repeats}")
    body = _body_block(seq, str(repeats))
    lines = [
        "; measurement harness (auto-generated; do not edit)",
        "BITS 64",
        "global _start",
        "",
        "section .bss",
        "align 4096",
        f"scratch: resb {SCRATCH_BYTES}",
        "",
        "section .text",
        *_prologue(),
        *body,
        *_epilogue_exit(),
        "",
    ]
    return AsmHarness(
        kind="counter",
        text="\n".join(lines),
        body="\n".join(body),
        rep_count=repeats,
    )


def _db_lines(label: str, data: bytes, per_line: int = 8) -> list[str]:
    lines = [f"{label}:"]
    for i in range(0, len(data), per_line):
        chunk = ", ".join(f"0x{b:02x}" for b in data[i : i + per_line])
        lines.append(f"    db {chunk}")
    return lines


def _dd_lines(label: str, values: Sequence[int], per_line: int = 16) -> list[str]:
    lines = [f"{label}:"]
    for i in range(0, len(values), per_line):
        chunk = ", ".join(str(v) for v in values[i : i + per_line])
        lines.append(f"    dd {chunk}")
    return lines


def _gadget(k: int, granularity: int) -> list[str]:
    """Transient encode of symbol k: load the secret byte, isolate the
    granularity-wide slice (most significant first), index the probe."""
    byte_idx = k * granularity // 8
    lines = [f"    movzx rax, byte [r13 + {byte_idx}]"]
    if granularity < 8:
        per_byte = 8 // granularity
        shift = granularity * (per_byte - 1 - (k % per_byte))
        if shift:
            lines.append(f"    shr rax, {shift}")
        lines.append(f"    and rax, {(1 << granularity) - 1}")
    lines.append("    shl rax, 10")
    lines.append("    mov rbx, [r14 + rax]")
    return lines


def positions_for(secret_len: int, granularity: int) -> int:
    return -(-secret_len * 8 // granularity)


def emit_leak_harness(
    seq: Sequence[ConcreteInstruction],
    branch_kind: BranchKind,
    fence: bool,
    n: int,
    granularity: int,
    *,
    comparison: Optional[ComparisonSpec] = None,
    secret: bytes = b"\x00",
    probe_order_seed: int = 0,
) -> AsmHarness:
    """Leak-protocol harness for one (branch, fence) variant."""
    if not seq:
        raise ContractViolation("cannot emit a leak harness for an empty sequence")
    if granularity not in (1, 4, 8):
        raise ConfigError(f"granularity must be 1, 4 or 8, got {granularity}")
    if n < 1:
        raise ContractViolation(f"repetition count must be >= 1, got {n}")
    if not secret:
        raise ContractViolation("secret pattern must be non-empty")
    if comparison is None:
        comparison = COMPARISONS[RegClass.GPR]
    branch_kind = BranchKind(branch_kind)

    slots = 1 << granularity
    positions = positions_for(len(secret), granularity)
    slot_order = list(range(slots))
    random.Random(probe_order_seed).shuffle(slot_order)
    jcc = "je" if branch_kind is BranchKind.JE else "jne"
    body = _body_block(seq, "REPS")

    lines = [
        "; measurement harness (auto-generated; do not edit)",
        "BITS 64",
        "global _start",
        "",
        f"%define SLOTS {slots}",
        f"%define STRIDE {PROBE_STRIDE}",
        f"%define POSITIONS {positions}",
        f"%define REPS {n}",
        "",
        "section .data",
        "align 64",
        *_db_lines("secret", secret),
        *_dd_lines("slot_order", slot_order),
        "",
        "section .bss",
        "align 4096",
        f"scratch: resb {SCRATCH_BYTES}",
        "probe: resb SLOTS * STRIDE",
        "times_buf: resq POSITIONS * SLOTS",
        "",
        "section .text",
        *_prologue(),
        "    lea r13, [rel secret]",
        "    lea r14, [rel probe]",
        "    lea r12, [rel times_buf]",
        "    ; pre-fault the probe pages",
        "    xor rcx, rcx",
        ".prefault:",
        "    mov rax, [r14 + rcx]",
        "    add rcx, 4096",
        "    cmp rcx, SLOTS * STRIDE",
        "    jb .prefault",
    ]

    for k in range(positions):
        lines += [
            f"; ---- position {k} ----",
            "    xor rcx, rcx",
            f".flush_{k}:",
            "    lea rsi, [rel slot_order]",
            "    mov esi, [rsi + rcx*4]",
            "    shl rsi, 10",
            "    clflush [r14 + rsi]",
            "    inc rcx",
            "    cmp rcx, SLOTS",
            f"    jb .flush_{k}",
            "    mfence",
            *body,
            *[f"    {c}" for c in comparison.lines],
        ]
        if fence:
            lines.append("    lfence")
        lines.append(f"    {jcc} .skip_{k}")
        lines += _gadget(k, granularity)
        lines += [
            f".skip_{k}:",
            "    mfence",
            "    xor rcx, rcx",
            f".probe_{k}:",
            "    lea rsi, [rel slot_order]",
            "    mov esi, [rsi + rcx*4]",
            "    shl rsi, 10",
            "    lfence",
            "    rdtsc",
            "    shl rdx, 32",
            "    or rax, rdx",
            "    mov r10, rax",
            "    mov rbx, [r14 + rsi]",
            "    lfence",
            "    rdtsc",
            "    shl rdx, 32",
            "    or rax, rdx",
            "    sub rax, r10",
            "    shr rsi, 10",
            "    mov [r12 + rsi*8], rax",
            "    inc rcx",
            "    cmp rcx, SLOTS",
            f"    jb .probe_{k}",
            "    add r12, SLOTS * 8",
        ]

    lines += [
        "    ; emit the timing matrix on stdout",
        "    mov rax, 1",
        "    mov rdi, 1",
        "    lea rsi, [rel times_buf]",
        "    mov rdx, POSITIONS * SLOTS * 8",
        "    syscall",
        *_epilogue_exit(),
        "",
    ]
    return AsmHarness(
        kind="leak",
        text="\n".join(lines),
        body="\n".join(body),
        rep_count=n,
        branch_kind=branch_kind,
        fence=fence,
        granularity=granularity,
    )


# --- structural checks (used by tests and the self-check CLI path) ----------


def prologue_registers(harness: AsmHarness) -> list[str]:
    """Registers pushed before the first body block, in push order."""
    out = []
    for line in harness.text.splitlines():
        s = line.strip()
        if s == BODY_BEGIN or s.startswith("; ---- position"):
            break
        if s.startswith("push "):
            out.append(s.split()[1])
    return out


def epilogue_registers(harness: AsmHarness) -> list[str]:
    """Registers popped after the last body block, in restore order
    (reversed so it is directly comparable to the push order)."""
    tail = harness.text.rsplit(BODY_END, 1)[-1]
    pops = [l.strip().split()[1] for l in tail.splitlines() if l.strip().startswith("pop ")]
    return list(reversed(pops))


def body_blocks(harness: AsmHarness) -> list[str]:
    """All emitted sequence-body blocks (identical by construction)."""
    blocks = []
    text = harness.text
    start = 0
    while True:
        b = text.find(BODY_BEGIN, start)
        if b < 0:
            break
        e = text.index(BODY_END, b)
        blocks.append(text[b + len(BODY_BEGIN) : e].strip("\n"))
        start = e + len(BODY_END)
    return blocks


def memory_base_registers(block: str) -> set[str]:
    """Base registers of every memory operand in a body block."""
    import re

    bases = set()
    for m in re.finditer(r"\[\s*(?:rel\s+)?([A-Za-z0-9]+)", block):
        bases.add(m.group(1).upper())
    return bases
