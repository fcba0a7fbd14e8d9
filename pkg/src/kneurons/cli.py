"""Command-line entry point: ``kneurons <subcommand> ...``.

Every run writes its result JSON plus ``manifest.json`` into ``--out``.  Result
files carry no wall-clock data, so identical invocations give byte-identical
results; the timestamp lives in the manifest only.  Layers are 1-based in all
output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    layer_overlap,
    layer_stats,
    overlap_curve_from_maps,
    refined_set,
    suppression_experiment,
)
from .attribution import AttributionConfig, AttributionMap, attribute
from .errors import ArgumentError, KnowledgeNeuronsError
from .grammar import (
    DEFAULT_FRACTION,
    attribute_dataset,
    convert_colorless_green,
    counts_by_stratum,
    load_agreement_dataset,
    stratify_stats,
)
from .model import load_model
from .prompts import bundled_prompt_sets, get_prompt_set
from .selection import NeuronSet, adaptive_select, coarse_select, refine

log = logging.getLogger("kneurons")

MANIFEST = "manifest.json"
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# argument helpers


def parse_t_grid(text: str) -> list[float]:
    """``start:stop:step`` (stop inclusive) or a single value."""
    parts = text.split(":")
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold grid {text!r}") from None
    if len(nums) == 1:
        return nums
    if len(nums) != 3 or nums[2] <= 0 or nums[1] < nums[0]:
        raise argparse.ArgumentTypeError(f"grid must be start:stop:step, got {text!r}")
    start, stop, step = nums
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 10) for k in range(n)]


def parse_layers(text: str) -> tuple[int, ...]:
    try:
        layers = tuple(int(x) - 1 for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}") from None
    if any(l < 0 for l in layers):
        raise argparse.ArgumentTypeError("layers are 1-based")
    return layers


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


class Run:
    """Collects outputs and input digests for one invocation, then writes the manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.inputs: dict[str, str] = {}
        self.model_id: str | None = None
        self.handle = None

    def note_input(self, path) -> None:
        p = Path(path)
        if p.is_file():
            self.inputs[str(p)] = sha256_file(p)

    def write(self, name: str, schema: str, payload: dict) -> Path:
        doc = {"schema": schema, "schema_version": SCHEMA_VERSION, "manifest": MANIFEST}
        doc.update(payload)
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_dumps(doc), encoding="utf-8")
        self.outputs.append(name)
        return path

    def finish(self) -> None:
        params = {k: v for k, v in sorted(vars(self.args).items()) if k != "func"}
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "parameters": json.loads(json.dumps(params, default=str)),
            "model": self.model_id,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": getattr(self.args, "seed", None),
            "toolkit_version": __version__,
            "created": datetime.now(timezone.utc).isoformat(),
        }
        (self.out / MANIFEST).write_text(_dumps(manifest), encoding="utf-8")


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _open_model(run: Run, args):
    if run.handle is None:
        if not args.model:
            raise ArgumentError("--model is required for this command")
        run.note_input(args.model)
        run.handle = load_model(args.model)
        run.model_id = run.handle.identifier
    return run.handle


def _prompt_sets(run: Run, names):
    sets = []
    for name in names:
        if name not in bundled_prompt_sets():
            run.note_input(name.rpartition(":")[0] if ":" in name and not Path(name).exists()
                           else name)
        sets.append(get_prompt_set(name))
    return sets


def _config(args) -> AttributionConfig:
    return AttributionConfig(steps=args.steps, layers=args.layers, normalize=args.normalize)


def _attribute_triples(run: Run, args, triples) -> list[AttributionMap]:
    """Attribute ``(prompt_id, text, target)`` triples, ``--jobs`` at a time, in input order."""
    config = _config(args)
    handle = _open_model(run, args)
    if args.jobs <= 1 or len(triples) <= 1:
        return [attribute(handle, text, target, config, prompt_id=pid)
                for pid, text, target in triples]
    local = threading.local()

    def work(triple):
        if not hasattr(local, "handle"):
            local.handle = load_model(args.model)
        pid, text, target = triple
        return attribute(local.handle, text, target, config, prompt_id=pid)

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        return list(pool.map(work, triples))


def _load_maps(run: Run, paths) -> list[AttributionMap]:
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    maps = []
    for f in files:
        try:
            doc = json.loads(f.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ArgumentError(f"cannot read attribution map {f}: {exc}") from exc
        if doc.get("schema") != "kneurons.attribution_map":
            continue
        run.note_input(f)
        maps.append(AttributionMap.from_dict(doc))
    if not maps:
        raise ArgumentError("no attribution maps found")
    return maps


def _maps_for(run: Run, args, names=None) -> list[AttributionMap]:
    if getattr(args, "maps", None):
        return _load_maps(run, args.maps)
    names = names if names is not None else args.prompts
    if not names:
        raise ArgumentError("give --prompts (with --model) or --maps")
    triples = [t for s in _prompt_sets(run, names) for t in s.triples()]
    return _attribute_triples(run, args, triples)


def _select(m: AttributionMap, args) -> NeuronSet:
    if args.adaptive is not None:
        return adaptive_select(m, args.adaptive)
    return coarse_select(m, args.t[0])


def _set_payload(s: NeuronSet) -> dict:
    return {"size": len(s), "layer_index_base": 1, "neurons": s.to_records()}


def _safe_name(prompt_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in prompt_id)


# ---------------------------------------------------------------------------
# subcommands


def cmd_attribute(run: Run, args) -> None:
    for m in _maps_for(run, args):
        doc = m.to_dict()
        del doc["schema"], doc["schema_version"]
        run.write(f"maps/{_safe_name(m.prompt_id)}.json", "kneurons.attribution_map", doc)


def cmd_stats(run: Run, args) -> None:
    stats = layer_stats(_maps_for(run, args))
    run.write("stats.json", "kneurons.layer_stats", stats.to_dict())
    for l, (mu, sd, mx) in enumerate(zip(stats.mean, stats.std, stats.max), 1):
        print(f"layer {l:2d}  mean {mu: .5f}  std {sd: .5f}  max {mx: .5f}")


def cmd_select(run: Run, args) -> None:
    maps = _maps_for(run, args)
    rows = [{"prompt_id": m.prompt_id, **_set_payload(_select(m, args))} for m in maps]
    run.write("select.json", "kneurons.neuron_sets",
              {"t": args.t[0] if args.adaptive is None else None, "adaptive": args.adaptive,
               "sets": rows})


def cmd_refine(run: Run, args) -> None:
    maps = _maps_for(run, args)
    refined = refine([_select(m, args) for m in maps], args.p)
    run.write("refine.json", "kneurons.refined_set",
              {"t": args.t[0] if args.adaptive is None else None, "adaptive": args.adaptive,
               "p": args.p, "n_prompts": len(maps), **_set_payload(refined)})
    print(f"{len(refined)} refined neurons from {len(maps)} prompts")


def _fact_maps(run, args):
    maps_a = _maps_for(run, args, args.a)
    maps_b = _maps_for(run, args, args.b)
    return maps_a, maps_b


def cmd_overlap(run: Run, args) -> None:
    maps_a, maps_b = _fact_maps(run, args)
    label = f"{'+'.join(args.a)} vs {'+'.join(args.b)}"
    curve = overlap_curve_from_maps(maps_a, maps_b, args.t, args.p, label=label)
    run.write("overlap.json", "kneurons.overlap_curve", curve.to_dict())
    for t, v, (na, nb) in zip(curve.t_grid, curve.values, curve.set_sizes):
        print(f"t={t:.3f}  overlap={v:.4f}  |A|={na}  |B|={nb}")


def cmd_layer_overlap(run: Run, args) -> None:
    if len(args.t) != 1:
        raise ArgumentError("layer-overlap takes a single --t value")
    maps_a, maps_b = _fact_maps(run, args)
    t = args.t[0]
    a, b = refined_set(maps_a, t, args.p), refined_set(maps_b, t, args.p)
    hist = layer_overlap(a, b, maps_a[0].shape[0], t)
    run.write("layer_overlap.json", "kneurons.layer_overlap",
              {"p": args.p, "sizes": [len(a), len(b)], **hist.to_dict()})
    for l, c in enumerate(hist.counts, 1):
        print(f"layer {l:2d}  common {c}")


def cmd_suppress(run: Run, args) -> None:
    (ps,) = _prompt_sets(run, args.prompts)
    maps = _maps_for(run, args)
    neurons = refine([_select(m, args) for m in maps], args.p)
    handle = _open_model(run, args)
    reports = []
    if len(neurons) == 0:
        raise ArgumentError("refined neuron set is empty; lower --t/--adaptive or --p")
    for pid, text, target in ps.triples():
        r = suppression_experiment(handle, text, target, neurons, args.trials, args.seed)
        reports.append({"prompt_id": pid, **r.to_dict()})
        print(f"{pid}: attributed drop {r.attributed_drop:+.4f}  "
              f"mean random drop {r.mean_random_drop:+.4f}")
    run.write("suppress.json", "kneurons.suppression",
              {"p": args.p, "refined": _set_payload(neurons), "reports": reports})


def cmd_grammar_probe(run: Run, args) -> None:
    handle = _open_model(run, args)
    run.note_input(args.data)
    examples, skipped = load_agreement_dataset(args.data, handle)
    if args.limit:
        examples = examples[: args.limit]
    records = attribute_dataset(handle, examples, _config(args))
    if not records:
        raise ArgumentError("no usable agreement examples")
    strata = stratify_stats(records)
    overall_good = layer_stats([r.good_map for r in records])
    overall_bad = layer_stats([r.bad_map for r in records])
    fraction = args.adaptive if args.adaptive is not None else DEFAULT_FRACTION
    payload = {
        "n_examples": len(records),
        "n_skipped": len(skipped),
        "adaptive": fraction,
        "layer_index_base": 1,
        "overall": {"good": overall_good.to_dict(), "bad": overall_bad.to_dict()},
        "strata": {str(s): {"good": g.to_dict(), "bad": b.to_dict()} for s, (g, b) in strata.items()},
        "counts": {str(s): v for s, v in counts_by_stratum(records, fraction).items()},
        "global_max": {"good": float(np.nanmax([np.nanmax(r.good_map.scores) for r in records])),
                       "bad": float(np.nanmax([np.nanmax(r.bad_map.scores) for r in records]))},
    }
    run.write("grammar.json", "kneurons.grammar", payload)
    print(f"{len(records)} examples attributed, {len(skipped)} skipped")


def cmd_grammar_convert(run: Run, args) -> None:
    run.note_input(args.source)
    n = convert_colorless_green(args.source, args.dest)
    print(f"wrote {n} examples to {args.dest}")


def cmd_toy_verify(run: Run, args) -> None:
    from .verify import run_suite

    report = run_suite(args.seeds, args.trials, args.steps)
    run.write("toy_verify.json", "kneurons.toy_verify", report)
    for c in report["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"{status}  {c['name']}: {c['value']:.3f} (required >= {c['required']})")
    if not report["passed"]:
        raise VerificationFailed("toy oracle suite failed")


def cmd_make_toy(run: Run, args) -> None:
    from .toy import toy_spec_for_prompts

    sets = _prompt_sets(run, args.prompts)
    spec = toy_spec_for_prompts(sets, args.toy_layers, args.toy_dim, args.seed)
    path = Path(args.out) / args.name
    path.write_text(_dumps(spec.to_dict()), encoding="utf-8")
    run.outputs.append(args.name)
    print(path)


def cmd_plot(run: Run, args) -> None:
    from .plotting import plot_result

    run.note_input(args.input)
    data = json.loads(Path(args.input).read_text(encoding="utf-8"))
    target = Path(args.out) / args.name
    plot_result(data, target, args.style, args.what)
    run.outputs.append(args.name)
    print(target)


class VerificationFailed(KnowledgeNeuronsError):
    category = "verification"


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="results", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=["json"], default="json")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", help="checkpoint dir, hub name, or toy-spec .json")
    model.add_argument("--steps", type=int, default=20, help="Riemann steps")
    model.add_argument("--layers", type=parse_layers, default=None,
                       help="comma-separated 1-based layers (default all)")
    model.add_argument("--normalize", action="store_true",
                       help="divide each map by its positive maximum")
    model.add_argument("--jobs", type=int, default=1)

    prompts = argparse.ArgumentParser(add_help=False)
    prompts.add_argument("--prompts", action="append", default=[],
                         help="bundled set id, prompt file, or file:set_id (repeatable)")
    prompts.add_argument("--maps", nargs="+", help="attribution map files or directories")

    thresh = argparse.ArgumentParser(add_help=False)
    thresh.add_argument("--t", type=parse_t_grid, default=[0.1],
                        help="threshold or start:stop:step grid")
    thresh.add_argument("--adaptive", type=float, default=None,
                        help="select by fraction of each map's maximum instead of --t")
    thresh.add_argument("--p", type=float, default=50.0, help="refinement percentage")

    pair = argparse.ArgumentParser(add_help=False)
    pair.add_argument("--a", action="append", required=True,
                      help="prompt set(s) for fact A; repeats are pooled before refinement")
    pair.add_argument("--b", action="append", required=True, help="prompt set(s) for fact B")

    parser = argparse.ArgumentParser(prog="kneurons", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, parents, help_):
        p = sub.add_parser(name, parents=parents, help=help_)
        p.set_defaults(func=func)
        return p

    add("attribute", cmd_attribute, [common, model, prompts], "attribution map per prompt")
    add("stats", cmd_stats, [common, model, prompts], "layer-wise mean/std/max over prompts")
    add("select", cmd_select, [common, model, prompts, thresh], "coarse neuron sets per prompt")
    add("refine", cmd_refine, [common, model, prompts, thresh], "multi-prompt refined set")
    p = add("overlap", cmd_overlap, [common, model, thresh, pair], "overlap-vs-t sweep")
    p.set_defaults(t=parse_t_grid("0:0.5:0.05"))
    add("layer-overlap", cmd_layer_overlap, [common, model, thresh, pair],
        "common neurons per layer at one t")
    p = add("suppress", cmd_suppress, [common, model, prompts, thresh],
            "zero refined neurons vs random size-matched sets")
    p.add_argument("--trials", type=int, default=50)

    grammar = sub.add_parser("grammar", help="number-agreement probe")
    gsub = grammar.add_subparsers(dest="grammar_command", required=True)
    g = gsub.add_parser("probe", parents=[common, model], help="attribute good vs bad forms")
    g.add_argument("--data", required=True, help="agreement JSON Lines file")
    g.add_argument("--adaptive", type=float, default=None)
    g.add_argument("--limit", type=int, default=0)
    g.set_defaults(func=cmd_grammar_probe)
    g = gsub.add_parser("convert", parents=[common], help="tab-separated corpus to JSON Lines")
    g.add_argument("source")
    g.add_argument("dest")
    g.set_defaults(func=cmd_grammar_convert)

    p = add("toy-verify", cmd_toy_verify, [common], "oracle-agreement suite on toy models")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--steps", type=int, default=20)

    p = add("make-toy", cmd_make_toy, [common, prompts], "toy spec covering prompt sets")
    p.add_argument("--name", default="toy.json")
    p.add_argument("--toy-layers", type=int, default=4)
    p.add_argument("--toy-dim", type=int, default=16)

    p = add("plot", cmd_plot, [common], "render a result file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--name", default="figure.svg", help="file name (.svg or .png)")
    p.add_argument("--style", choices=["line", "bar"], default="line")
    p.add_argument("--what", choices=["scores", "counts"], default=None,
                   help="for grammar results: score curves or neuron counts")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("select", "refine", "suppress") and args.adaptive is None \
                and len(args.t) != 1:
            raise ArgumentError(f"{args.command} takes a single --t value")
        run = Run(args, argv)
        args.func(run, args)
        run.finish()
    except KnowledgeNeuronsError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
