"""Bundled catalogs: a tiny synthetic one, a curated corpus one, and
two realistically sized generated ones.

The sized catalogs reproduce the per-set instruction counts of the two
target microarchitectures so action-space shaping, filtering, and the
trainer can be exercised at scale without shipping a full ISA dump.
Generated mnemonics are synthetic (``<SET>_OP<k>``); the curated
catalogs use real mnemonics so sequence files parse against them.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .catalog import (
    GPR16_POOL,
    GPR32_POOL,
    GPR64_POOL,
    IMM_POOL,
    K_POOL,
    MMX_POOL,
    ST_POOL,
    XMM_POOL,
    YMM_POOL,
    ZMM_POOL,
    Catalog,
    InstructionSet,
    InstructionSpec,
    OperandKind,
    OperandSlot,
    RegClass,
    filter_denylist,
    load_catalog,
    load_denylist,
)
from .errors import ConfigError

# Instructions per set exposed to the agent on Skylake-X, after the
# privileged/unencodable denylist is applied: 74 sets, 12598 total,
# largest set AVX512F_512 with 2192 entries.
SKYLAKE_SET_COUNTS: dict[str, int] = {
    "ADOX_ADCX": 8, "AES": 12,
    "AVX": 695, "AVX2": 286,
    "AVX2GATHER": 16, "AVX512F_512": 2192,
    "AVX512F_128": 1816, "AVX512F_256": 1940,
    "AVX512F_SCALAR": 584, "AVX512DQ_128": 247,
    "AVX512DQ_256": 281, "AVX512DQ_512": 357,
    "AVX512BW_128": 467, "AVX512BW_256": 467,
    "AVX512BW_512": 467, "AVX512F_128N": 23,
    "AVX512DQ_SCALAR": 44, "AVX512CD_512": 38,
    "AVX512CD_128": 38, "AVX512CD_256": 38,
    "AVX512BW_128N": 8, "AVX512DQ_128N": 8,
    "AVX512DQ_KOP": 18, "AVX512BW_KOP": 34,
    "AVX512F_KOP": 15, "AVXAES": 12,
    "I86": 809, "I386": 196,
    "I486REAL": 37, "CMOV": 96,
    "PENTIUMREAL": 5, "I186": 124,
    "LONGMODE": 24, "LAHF": 2,
    "I286PROTECTED": 26, "I286REAL": 10,
    "FAT_NOP": 3, "RDPMC": 1,
    "PPRO": 2, "BMI1": 26,
    "BMI2": 32, "CET": 2,
    "F16C": 8, "FMA": 192,
    "INVPCID": 1, "CMPXCHG16B": 2,
    "LZCNT": 6, "PENTIUMMMX": 129,
    "SSE": 97, "MOVBE": 6,
    "PCLMULQDQ": 2, "RDRAND": 3,
    "RDSEED": 3, "RDTSCP": 1,
    "RDWRFSGS": 8, "FXSAVE": 2,
    "FXSAVE64": 2, "SSEMXCSR": 2,
    "SSE2": 264, "SSE2MMX": 6,
    "SSE3": 20, "SSE3X87": 2,
    "SSE4": 96, "SSE42": 25,
    "POPCNT": 6, "SSSE3MMX": 32,
    "SSSE3": 32, "X87": 119,
    "FCMOV": 8, "FCOMI": 4,
    "XSAVE": 6, "XSAVEC": 2,
    "XSAVEOPT": 2, "XSAVES": 4,
}

SKYLAKE_TOTAL = 12598
RAPTORLAKE_TOTAL = 3996
RAPTORLAKE_MAX_SET = 468

# Privileged / ring-0 / fault-by-construction mnemonics. The generated
# Skylake catalog plants these so the bundled denylist has real work to
# do; the post-filter count is exactly SKYLAKE_TOTAL.
PRIVILEGED_MNEMONICS = (
    "HLT", "CLI", "STI", "LGDT", "LIDT", "RDMSR", "WRMSR",
    "IN", "OUT", "SWAPGS",
)

# Sets kept (or gained) when AVX-512 and friends are fused off.
_RAPTOR_NEW_COUNTS: dict[str, int] = {
    "AVX_VNNI": 16, "VAES": 4, "VPCLMULQDQ": 4,
    "GFNI_SSE": 8, "GFNI_AVX": 16, "SHA": 7,
    "MOVDIR": 2, "WAITPKG": 3, "CLDEMOTE": 1,
    "SERIALIZE": 1, "HRESET": 1, "PTWRITE": 1,
    "UINTR": 4, "PCONFIG": 1, "CLWB": 1,
    "CLFLUSHOPT": 1, "PREFETCHW": 2, "KEYLOCKER": 8,
}


def _reg(pool: tuple[str, ...]) -> OperandSlot:
    return OperandSlot(OperandKind.REGISTER, pool)


def _mem(size: str = "") -> OperandSlot:
    return OperandSlot(OperandKind.MEMORY, (f"{size} [R15]".strip(),))


def _imm() -> OperandSlot:
    return OperandSlot(OperandKind.IMMEDIATE, IMM_POOL)


def _ins(mnemonic, set_name, slots=(), regtypes=()):
    return InstructionSpec(
        mnemonic=mnemonic,
        set_name=set_name,
        operand_slots=tuple(slots),
        register_types=frozenset(regtypes),
    )


def build_synthetic() -> Catalog:
    """Three sets sized 2/5/10 with at most 4 operand candidates per slot.

    Small enough to eyeball, rich enough to cover every operand kind and
    register class the harness emitters care about.
    """
    st4 = ("ST1", "ST2", "ST3", "ST4")
    mm4 = ("MM0", "MM1", "MM2", "MM3")
    e4 = ("EAX", "EBX", "ECX", "EDX")
    a4 = ("AX", "BX", "CX", "DX")
    k4 = ("K1", "K2", "K3", "K4")
    z4 = ("ZMM1", "ZMM2", "ZMM3", "ZMM4")
    x4 = ("XMM0", "XMM1", "XMM2", "XMM3")
    x4h = ("XMM1", "XMM2", "XMM3", "XMM4")

    x87compare = InstructionSet(
        name="X87COMPARE",
        instructions=(
            _ins("FCOMI", "X87COMPARE", [_reg(("ST0",)), _reg(st4)], [RegClass.X87]),
            _ins("FCOMIP", "X87COMPARE", [_reg(st4)], [RegClass.X87]),
        ),
    )
    mmxarith = InstructionSet(
        name="MMXARITH",
        instructions=(
            _ins("PSUBQ", "MMXARITH", [_reg(mm4), _mem()], [RegClass.MMX]),
            _ins("PADDQ", "MMXARITH", [_reg(mm4), _mem()], [RegClass.MMX]),
            _ins("PXOR", "MMXARITH", [_reg(mm4), _reg(mm4)], [RegClass.MMX]),
            _ins("PANDN", "MMXARITH", [_reg(mm4), _reg(mm4)], [RegClass.MMX]),
            _ins("PCMPEQB", "MMXARITH", [_reg(mm4), _mem()], [RegClass.MMX]),
        ),
    )
    mixed = InstructionSet(
        name="MIXED",
        instructions=(
            _ins("NOP", "MIXED"),
            _ins("SERIALIZE", "MIXED"),
            _ins("LZCNT", "MIXED", [_reg(e4), _mem("dword")], [RegClass.GPR]),
            _ins("RDGSBASE", "MIXED", [_reg(e4)], [RegClass.GPR]),
            _ins("VERW", "MIXED", [_mem("word")], [RegClass.SEG]),
            _ins("VERR", "MIXED", [_reg(a4)], [RegClass.SEG]),
            _ins("VCMPPD", "MIXED", [_reg(k4), _reg(z4), _reg(z4), _imm()],
                 [RegClass.K, RegClass.ZMM]),
            _ins("MOVAPS", "MIXED", [_reg(x4), _reg(x4)], [RegClass.XMM]),
            _ins("PCLMULQDQ", "MIXED", [_reg(x4h), _mem(), _imm()], [RegClass.XMM]),
            _ins("FLD", "MIXED", [_mem("qword")], [RegClass.X87]),
        ),
    )
    return Catalog(sets=(x87compare, mmxarith, mixed))


def build_corpus_catalog() -> Catalog:
    """Curated real-mnemonic catalog covering every bundled corpus sequence."""
    rows = {
        "FCOMI": [
            _ins("FCOMI", "FCOMI", [_reg(("ST0",)), _reg(ST_POOL)], [RegClass.X87]),
            _ins("FCOMIP", "FCOMI", [_reg(ST_POOL)], [RegClass.X87]),
        ],
        "X87": [
            _ins("FLD", "X87", [_mem("qword")], [RegClass.X87]),
        ],
        "PENTIUMMMX": [
            _ins("PSUBQ", "PENTIUMMMX", [_reg(MMX_POOL), _mem()], [RegClass.MMX]),
        ],
        "AVX512F_512": [
            _ins("VCMPPD", "AVX512F_512", [_reg(K_POOL), _reg(ZMM_POOL), _reg(ZMM_POOL), _imm()],
                 [RegClass.K, RegClass.ZMM]),
        ],
        "SERIALIZE": [
            _ins("SERIALIZE", "SERIALIZE"),
        ],
        "RDWRFSGS": [
            _ins("RDGSBASE", "RDWRFSGS", [_reg(GPR32_POOL)], [RegClass.GPR]),
            _ins("WRGSBASE", "RDWRFSGS", [_reg(GPR64_POOL)], [RegClass.GPR]),
        ],
        "AVXAES": [
            _ins("VAESDECLAST", "AVXAES", [_reg(YMM_POOL), _reg(YMM_POOL), _mem("yword")],
                 [RegClass.YMM]),
        ],
        "I286PROTECTED": [
            _ins("VERR", "I286PROTECTED", [_reg(GPR16_POOL)], [RegClass.SEG]),
            _ins("VERW", "I286PROTECTED", [_mem("word")], [RegClass.SEG]),
            _ins("LAR", "I286PROTECTED", [_reg(GPR64_POOL), _mem()], [RegClass.SEG]),
            _ins("LSL", "I286PROTECTED", [_reg(GPR64_POOL), _mem()], [RegClass.SEG]),
        ],
        "F16C": [
            _ins("VCVTPS2PH", "F16C", [_reg(XMM_POOL), _reg(YMM_POOL), _imm()], [RegClass.XMM]),
        ],
        "CMPXCHG16B": [
            _ins("CMPXCHG16B", "CMPXCHG16B", [_mem("oword")], [RegClass.GPR]),
            _ins("LOCK CMPXCHG16B", "CMPXCHG16B", [_mem("oword")], [RegClass.GPR]),
        ],
        "PCLMULQDQ": [
            _ins("PCLMULQDQ", "PCLMULQDQ", [_reg(XMM_POOL), _mem(), _imm()], [RegClass.XMM]),
        ],
        "LZCNT": [
            _ins("LZCNT", "LZCNT", [_reg(GPR32_POOL), _mem("dword")], [RegClass.GPR]),
        ],
        "BMI1": [
            _ins("TZCNT", "BMI1", [_reg(GPR32_POOL), _mem("dword")], [RegClass.GPR]),
        ],
        "BMI2": [
            _ins("MULX", "BMI2", [_reg(GPR64_POOL), _reg(GPR64_POOL), _mem("qword")],
                 [RegClass.GPR]),
            _ins("PEXT", "BMI2", [_reg(GPR64_POOL), _reg(GPR64_POOL), _mem("qword")],
                 [RegClass.GPR]),
        ],
        "ADOX_ADCX": [
            _ins("ADCX", "ADOX_ADCX", [_reg(GPR64_POOL), _mem("qword")], [RegClass.GPR]),
        ],
        "CMOV": [
            _ins("CMOVNL", "CMOV", [_reg(GPR64_POOL), _mem("qword")], [RegClass.GPR]),
        ],
        "RDTSCP": [
            _ins("RDTSCP", "RDTSCP", [], [RegClass.GPR]),
        ],
        "PREFETCHWT1": [
            _ins("PREFETCHWT1", "PREFETCHWT1", [_mem("byte")], [RegClass.GPR]),
        ],
        "MISC": [
            _ins("NOP", "MISC"),
        ],
    }
    return Catalog(
        sets=tuple(InstructionSet(name=n, instructions=tuple(v)) for n, v in rows.items())
    )


# --- sized generators -------------------------------------------------------


def _slots_for(set_name: str, idx: int) -> tuple[tuple[OperandSlot, ...], frozenset]:
    """Deterministic operand-slot assignment for a generated instruction."""
    if set_name.startswith("AVX512") and set_name.endswith("KOP"):
        return ( (_reg(K_POOL), _reg(K_POOL)), frozenset([RegClass.K]) )
    if set_name.startswith("AVX512"):
        if "SCALAR" in set_name or "128" in set_name:
            pool, cls = XMM_POOL, RegClass.XMM
        elif "256" in set_name:
            pool, cls = YMM_POOL, RegClass.YMM
        else:
            pool, cls = ZMM_POOL, RegClass.ZMM
        variants = (
            (_reg(pool), _reg(pool), _reg(pool)),
            (_reg(pool), _reg(pool), _mem()),
            (_reg(pool), _mem(), _imm()),
        )
        return variants[idx % 3], frozenset([cls])
    if "MMX" in set_name:
        variants = ((_reg(MMX_POOL), _reg(MMX_POOL)), (_reg(MMX_POOL), _mem()))
        return variants[idx % 2], frozenset([RegClass.MMX])
    if set_name in ("X87", "FCMOV", "FCOMI", "SSE3X87"):
        variants = ((_reg(ST_POOL),), (_reg(("ST0",)), _reg(ST_POOL)), (_mem("qword"),))
        return variants[idx % 3], frozenset([RegClass.X87])
    if set_name.startswith(("SSE", "AES", "PCLMULQDQ", "SSSE3", "SHA", "GFNI_SSE")):
        variants = (
            (_reg(XMM_POOL), _reg(XMM_POOL)),
            (_reg(XMM_POOL), _mem()),
            (_reg(XMM_POOL), _mem(), _imm()),
        )
        return variants[idx % 3], frozenset([RegClass.XMM])
    if set_name.startswith(("AVX", "F16C", "FMA", "VAES", "VPCLMULQDQ", "GFNI_AVX")):
        variants = (
            (_reg(YMM_POOL), _reg(YMM_POOL), _reg(YMM_POOL)),
            (_reg(YMM_POOL), _reg(YMM_POOL), _mem("yword")),
            (_reg(XMM_POOL), _reg(XMM_POOL), _mem()),
        )
        cls = RegClass.YMM if idx % 3 != 2 else RegClass.XMM
        return variants[idx % 3], frozenset([cls])
    if set_name == "I286PROTECTED":
        variants = ((_reg(GPR16_POOL),), (_mem("word"),), (_reg(GPR64_POOL), _mem()))
        return variants[idx % 3], frozenset([RegClass.SEG])
    variants = (
        (_reg(GPR64_POOL), _reg(GPR64_POOL)),
        (_reg(GPR64_POOL), _mem("qword")),
        (_reg(GPR32_POOL), _imm()),
        (),
    )
    regtypes = frozenset() if idx % 4 == 3 else frozenset([RegClass.GPR])
    return variants[idx % 4], regtypes


def _generated_set(name: str, count: int) -> InstructionSet:
    instrs = []
    for k in range(count):
        slots, regtypes = _slots_for(name, k)
        instrs.append(
            InstructionSpec(
                mnemonic=f"{name}_OP{k:04d}",
                set_name=name,
                operand_slots=slots,
                register_types=regtypes,
            )
        )
    return InstructionSet(name=name, instructions=tuple(instrs))


def build_skylake_sized(include_privileged: bool = True) -> Catalog:
    """Skylake-X-shaped catalog: 74 sets, 12598 instructions after the
    bundled denylist removes the planted privileged entries."""
    sets = []
    for name, count in SKYLAKE_SET_COUNTS.items():
        iset = _generated_set(name, count)
        if name == "I86" and include_privileged:
            extra = tuple(
                InstructionSpec(mnemonic=m, set_name=name, operand_slots=(),
                                register_types=frozenset())
                for m in PRIVILEGED_MNEMONICS
            )
            iset = InstructionSet(name=name, instructions=iset.instructions + extra)
        sets.append(iset)
    return Catalog(sets=tuple(sets))


def _raptor_counts() -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, count in SKYLAKE_SET_COUNTS.items():
        if name.startswith("AVX512"):
            continue
        counts[name] = min(RAPTORLAKE_MAX_SET, count)
    counts.update(_RAPTOR_NEW_COUNTS)
    assert len(counts) == 72, len(counts)
    # Top up deterministically to the published total, never exceeding
    # the published largest-set size.
    names = sorted(counts)
    total = sum(counts.values())
    i = 0
    while total < RAPTORLAKE_TOTAL:
        name = names[i % len(names)]
        if counts[name] < RAPTORLAKE_MAX_SET:
            counts[name] += 1
            total += 1
        i += 1
    assert total == RAPTORLAKE_TOTAL
    return counts


def build_raptorlake_sized() -> Catalog:
    """Raptor-Lake-shaped catalog: 72 sets, 3996 instructions, largest 468."""
    counts = _raptor_counts()
    return Catalog(sets=tuple(_generated_set(n, c) for n, c in counts.items()))


# --- named catalog resolution ----------------------------------------------------

DATA_DIR = Path(__file__).resolve().parent / "data"

_NAMED_CATALOGS = ("synthetic", "corpus", "skylake", "raptorlake")


def resolve_catalog(name: str) -> Catalog:
    """Map a catalog name (or filesystem path) to a loaded catalog.

    Named catalogs: ``synthetic`` and ``corpus`` load the bundled JSON
    files; ``skylake`` and ``raptorlake`` are generated at full ISA
    scale. Anything else is treated as a path to a catalog JSON file.
    """
    if name == "synthetic":
        return load_catalog(DATA_DIR / "synthetic_catalog.json")
    if name == "corpus":
        return load_catalog(DATA_DIR / "corpus_catalog.json")
    if name == "skylake":
        return build_skylake_sized()
    if name == "raptorlake":
        return build_raptorlake_sized()
    path = Path(name)
    if not path.exists():
        raise ConfigError(
            f"unknown catalog {name!r}: not one of {_NAMED_CATALOGS} and not a file"
        )
    return load_catalog(path)


def resolve_denylist(name: str) -> list[str]:
    """Map a denylist name to mnemonics: 'builtin', 'none'/'', or a path."""
    if name == "builtin":
        return load_denylist(DATA_DIR / "denylist.txt")
    if name in ("", "none"):
        return []
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"denylist file {name!r} not found")
    return load_denylist(path)


def load_run_catalog(catalog_name: str, denylist_name: str = "builtin") -> Catalog:
    """Resolve and denylist-filter the catalog a run will train against."""
    catalog = resolve_catalog(catalog_name)
    deny = resolve_denylist(denylist_name)
    return filter_denylist(catalog, deny) if deny else catalog


# --- discovered-sequence corpus -----------------------------------------------

CORPUS_DIR = DATA_DIR / "corpus"


@dataclasses.dataclass(frozen=True)
class CorpusEntry:
    """One bundled discovered sequence plus its measurement metadata."""

    name: str
    mechanism: str
    asm_path: Path
    lines: tuple[str, ...]
    granularity_bits: int
    availability: dict
    notes: str

    def leaks_on(self, uarch: str) -> bool:
        info = self.availability.get(uarch)
        return bool(info and info.get("leaks"))


def load_corpus_entry(name: str) -> CorpusEntry:
    """Load one corpus entry by name (sidecar JSON + assembly text)."""
    meta_path = CORPUS_DIR / f"{name}.json"
    if not meta_path.exists():
        known = ", ".join(e.name for e in list_corpus())
        raise ConfigError(f"unknown corpus entry {name!r} (known: {known})")
    meta = json.loads(meta_path.read_text())
    asm_path = CORPUS_DIR / meta["file"]
    lines = tuple(
        ln for ln in asm_path.read_text().splitlines()
        if ln.split(";", 1)[0].strip()
    )
    return CorpusEntry(
        name=meta["name"],
        mechanism=meta["mechanism"],
        asm_path=asm_path,
        lines=lines,
        granularity_bits=int(meta.get("granularity_bits", 4)),
        availability=meta.get("availability", {}),
        notes=meta.get("notes", ""),
    )


def list_corpus() -> list[CorpusEntry]:
    """All bundled corpus entries, sorted by name."""
    return [load_corpus_entry(p.stem) for p in sorted(CORPUS_DIR.glob("*.json"))]
