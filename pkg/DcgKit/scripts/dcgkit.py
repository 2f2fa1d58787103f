import functools
import logging
import os
import sys
import tempfile

import click

from DcgKit.core import COLS, ROWS, Partition, pairwise_euclidean, \
    rank_normalize
from DcgKit.dcg import DcgConfig, WalkError, WalkParams, dcg_run
from DcgKit.dm import ALGORITHMS, ENERGY_METHODS, HC_AVERAGE, TV, \
    CouplingConfig, block_bounds, blocks, cluster_order, couple, discretize, \
    energy_density, merge_partition, permuted
from DcgKit.hc import AVERAGE, LINKAGES, hc_build, hc_tree
from DcgKit.mimic import FIXED, MODES, MimicError, mimic_ensemble
from DcgKit.read import read_alignment, read_coupling, read_distance, \
    read_matrix, read_similarity
from DcgKit.seqscore import FORMATS, ScoringParams, normalized_scores, \
    polytypic_matrix, standardize
from DcgKit.util import RunManifest, compare_outputs, file_digest, \
    parse_grid, read_manifest
from DcgKit.write import ensure_dir, partition_record, tree_record, \
    write_energy, write_json, write_matrix, write_newick, write_profile, \
    write_square

logger = logging.getLogger("DcgKit")

INPUT_ERROR = 2
EMPTY_SELECTION = 3
RUN_ERROR = 1


def guarded(func):
    """Turn library errors into a diagnostic and an exit code"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ValueError, OSError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(INPUT_ERROR)
        except (WalkError, MimicError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(RUN_ERROR)
    return wrapper


def _start(ctx, command: str, seed=None) -> RunManifest:
    params = {k: v for k, v in ctx.params.items()}
    argv = ctx.obj.get("argv") if ctx.obj else None
    return RunManifest(command=command, argv=list(argv or []),
                       parameters=params, seed=seed)


def _distance_input(manifest: RunManifest, matrix, distance, similarity,
                    axis: str, normalize: bool):
    given = [p for p in (matrix, distance, similarity) if p]
    if len(given) != 1:
        raise ValueError("give exactly one of --matrix, --distance or "
                         "--similarity")
    manifest.add_input(given[0])
    if distance:
        return read_distance(distance)
    if similarity:
        return read_similarity(similarity)
    M = read_matrix(matrix)
    if normalize:
        M = rank_normalize(M)
    return pairwise_euclidean(M, axis)


def _dcg_config(grid, grid_points, trajectories, visit_threshold,
                spike_factor, max_steps, eigen_tol, min_run) -> DcgConfig:
    walk = WalkParams(visit_threshold=visit_threshold,
                      spike_factor=spike_factor, max_steps=max_steps)
    return DcgConfig(grid=tuple(parse_grid(grid)) if grid else None,
                     grid_points=grid_points, m_traj=trajectories, walk=walk,
                     rel_tol=eigen_tol, min_run=min_run)


def dcg_options(func):
    """Temperature-grid and random-walk flags shared by dcg and dm"""
    options = [
        click.option("--grid", help="Temperatures as lo:hi:count (log "
                     "spaced) or a comma separated list. Default spans "
                     "median/10 to 10*max of the distances."),
        click.option("--grid-points", default=30, show_default=True,
                     help="Points in the default grid."),
        click.option("--trajectories", default=100, show_default=True,
                     help="Random walks per temperature."),
        click.option("--visit-threshold", default=5, show_default=True,
                     help="Visits after which a node is removed."),
        click.option("--spike-factor", default=5.0, show_default=True,
                     help="Removal gap multiple that starts a new cluster."),
        click.option("--max-steps", default=1_000_000, show_default=True,
                     help="Step cap per walk."),
        click.option("--eigen-tol", default=0.05, show_default=True,
                     help="Eigenvalues above this share of the largest count "
                     "as clusters."),
        click.option("--min-run", default=3, show_default=True,
                     help="Shortest run of equal counts that makes a level."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def input_options(func):
    options = [
        click.option("--matrix", type=click.Path(exists=True, dir_okay=False),
                     help="Labelled data matrix (CSV)."),
        click.option("--distance", type=click.Path(exists=True,
                                                   dir_okay=False),
                     help="Labelled distance matrix (CSV)."),
        click.option("--similarity", type=click.Path(exists=True,
                                                     dir_okay=False),
                     help="Labelled similarity matrix in [0, 1] (CSV), e.g. "
                     "the output of `dcgkit score`."),
        click.option("--axis", type=click.Choice([ROWS, COLS]), default=ROWS,
                     show_default=True, help="Cluster the rows or the "
                     "columns of --matrix."),
        click.option("--normalize/--no-normalize", default=True,
                     show_default=True, help="Rank-normalize real-valued "
                     "features of --matrix."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.group(no_args_is_help=True)
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for "
              "debug detail.")
@click.pass_context
def main(ctx, verbose: int = 0):
    """
    DCG trees, Data Mechanics coupling, matrix mimicking and sequence scoring
    from the command line. Every command writes its results plus a
    manifest.json into --out.
    """
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(level)
    ctx.ensure_object(dict)


@main.command("dcg", help="Build a DCG tree from a data, distance or "
              "similarity matrix.")
@input_options
@dcg_options
@click.option("--seed", default=0, show_default=True, help="Master seed.")
@click.option("--save-sharing", is_flag=True, help="Also write the sharing "
              "matrix of every grid temperature.")
@click.option("-o", "--out", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.pass_context
@guarded
def dcg(ctx, matrix, distance, similarity, axis, normalize, grid, grid_points,
        trajectories, visit_threshold, spike_factor, max_steps, eigen_tol,
        min_run, seed, save_sharing, out):
    manifest = _start(ctx, "dcg", seed)
    D = _distance_input(manifest, matrix, distance, similarity, axis,
                        normalize)
    config = _dcg_config(grid, grid_points, trajectories, visit_threshold,
                         spike_factor, max_steps, eigen_tol, min_run)
    result = dcg_run(D, config, seed)
    prof = result.profile
    ensure_dir(out)
    write_newick(result.tree, os.path.join(out, "tree.nwk"))
    write_profile(prof.grid, prof.counts, os.path.join(out, "profile.tsv"),
                  [sel.index for sel in prof.selected])
    if save_sharing:
        sharing_dir = ensure_dir(os.path.join(out, "sharing"))
        for g, Q in enumerate(prof.sharing):
            write_square(Q.q, D.labels,
                         os.path.join(sharing_dir, f"T{g:03d}.csv"))
    report = {
        "n": D.n,
        "seed": seed,
        "parameters": config.as_dict(),
        "profile": [{"temperature": T, "cluster_count": N,
                     "failed_trajectories": Q.failed}
                    for T, N, Q in zip(prof.grid, prof.counts, prof.sharing)],
        "selected": [{"temperature": sel.temperature, "grid_index": sel.index,
                      "k": sel.partition.k,
                      "ultrametric_violation_share":
                          prof.sharing[sel.index].ultrametric_violations(
                              D.labels)}
                     for sel in prof.selected],
        "tree": tree_record(result.tree),
        "empty_selection": result.empty_selection,
    }
    write_json(report, os.path.join(out, "report.json"))
    manifest.finish(out)
    click.echo(f"tree levels (k): {result.tree.branch_counts}")
    if result.empty_selection:
        click.echo("warning: no temperature was selected; wrote a root-only "
                   "tree", err=True)
        ctx.exit(EMPTY_SELECTION)


@main.command("hc", help="Build a hierarchical clustering tree.")
@input_options
@click.option("--linkage", type=click.Choice(LINKAGES), default=AVERAGE,
              show_default=True)
@click.option("-o", "--out", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.pass_context
@guarded
def hc(ctx, matrix, distance, similarity, axis, normalize, linkage, out):
    manifest = _start(ctx, "hc")
    D = _distance_input(manifest, matrix, distance, similarity, axis,
                        normalize)
    dendrogram = hc_build(D, linkage)
    tree = hc_tree(D, linkage)
    ensure_dir(out)
    write_newick(dendrogram, os.path.join(out, "dendrogram.nwk"))
    write_newick(tree, os.path.join(out, "tree.nwk"))
    write_json({"linkage": linkage,
                "merges": [m._asdict() for m in dendrogram.merges],
                "reachable_counts": dendrogram.reachable_counts(),
                "tree": tree_record(tree)},
               os.path.join(out, "report.json"))
    manifest.finish(out)
    click.echo(f"{len(dendrogram.merges)} merges, top height "
               f"{dendrogram.merges[-1].height:g}")


@main.command("dm", help="Couple row and column trees (Data Mechanics) and "
              "write the permuted matrix with its block structure.")
@click.option("--matrix", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Labelled data matrix (CSV).")
@click.option("--row-alg", type=click.Choice(ALGORITHMS), default=HC_AVERAGE,
              show_default=True, help="Tree builder for rows.")
@click.option("--col-alg", type=click.Choice(ALGORITHMS), default=HC_AVERAGE,
              show_default=True, help="Tree builder for columns.")
@click.option("--iterations", default=3, show_default=True,
              help="Maximum coupling iterations.")
@click.option("--row-k", multiple=True, type=int, help="Row cluster count "
              "used in each iteration (repeat the flag per iteration). "
              "Default round(sqrt(rows)).")
@click.option("--col-k", multiple=True, type=int, help="Column cluster count "
              "used in each iteration. Default round(sqrt(columns)).")
@click.option("--energy", type=click.Choice(ENERGY_METHODS), default=TV,
              show_default=True, help="Energy density reported for the "
              "final blocks.")
@click.option("--normalize/--no-normalize", default=True, show_default=True,
              help="Rank-normalize real-valued features before coupling.")
@dcg_options
@click.option("--seed", default=0, show_default=True, help="Master seed.")
@click.option("-o", "--out", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.pass_context
@guarded
def dm(ctx, matrix, row_alg, col_alg, iterations, row_k, col_k, energy,
       normalize, grid, grid_points, trajectories, visit_threshold,
       spike_factor, max_steps, eigen_tol, min_run, seed, out):
    manifest = _start(ctx, "dm", seed)
    manifest.add_input(matrix)
    M = read_matrix(matrix)
    cfg = CouplingConfig(max_iterations=iterations, row_algorithm=row_alg,
                         col_algorithm=col_alg, row_k=row_k, col_k=col_k,
                         dcg=_dcg_config(grid, grid_points, trajectories,
                                         visit_threshold, spike_factor,
                                         max_steps, eigen_tol, min_run))
    coupled = rank_normalize(M) if normalize else M
    result = couple(coupled, cfg, seed)
    row_order = result.row_tree.leaf_order()
    col_order = result.col_tree.leaf_order()
    bd = blocks(M, result.row_partition, result.col_partition)
    observed = energy_density(discretize(M), bd, energy)
    ensure_dir(out)
    write_matrix(permuted(M, result), os.path.join(out, "permuted.csv"))
    write_json({
        "row_partition": partition_record(result.row_partition,
                                          M.row_labels),
        "col_partition": partition_record(result.col_partition,
                                          M.col_labels),
        "row_tree": tree_record(result.row_tree),
        "col_tree": tree_record(result.col_tree),
        "row_order": [M.row_labels[i] for i in row_order],
        "col_order": [M.col_labels[j] for j in col_order],
        "row_cluster_order": cluster_order(row_order, result.row_partition),
        "col_cluster_order": cluster_order(col_order, result.col_partition),
        "row_blocks": block_bounds(row_order, result.row_partition),
        "col_blocks": block_bounds(col_order, result.col_partition),
        "log": list(result.log),
        "iterations": result.iterations,
        "stable": result.stable,
        "energy": {"method": energy, "value": observed},
    }, os.path.join(out, "coupling.json"))
    manifest.finish(out)
    click.echo(f"blocks {bd.label}, energy density {observed:.6g}, "
               f"{'stable' if result.stable else 'not stable'} after "
               f"{result.iterations} iterations")


def _parse_setups(text: str, rows_k: int, cols_k: int):
    if not text:
        return [(rows_k, cols_k)]
    setups = []
    for item in text.split(","):
        try:
            r, c = (int(x) for x in item.lower().strip().split("x"))
        except ValueError:
            raise ValueError(f"--merge entry '{item}' must look like 3x2")
        setups.append((r, c))
    return setups


def _aligned(partition, order, saved_labels, labels, what: str):
    if sorted(saved_labels) != sorted(labels):
        raise ValueError(f"blocks file {what} labels do not match the matrix")
    position = {label: i for i, label in enumerate(saved_labels)}
    index = [position[label] for label in labels]
    aligned = Partition([partition.assignment[i] for i in index])
    # saved cluster ids are renumbered by the new label order
    remap = {}
    for i, label in enumerate(labels):
        remap.setdefault(partition.assignment[position[label]],
                         aligned.assignment[i])
    return aligned, [remap[c] for c in order]


@main.command("mimic", help="Energy densities of mimicked matrices for one "
              "or more block setups.")
@click.option("--matrix", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Labelled binary or coded matrix (CSV).")
@click.option("--blocks", "blocks_file", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="coupling.json written by `dcgkit dm`.")
@click.option("--reps", default=100, show_default=True,
              help="Mimicked matrices per setup.")
@click.option("--mode", type=click.Choice(MODES), default=FIXED,
              show_default=True, help="fixed keeps the purine/pyrimidine "
              "cells, resampled redraws them.")
@click.option("--merge", default="", help="Block setups such as 3x3,3x2,3x1 "
              "(trailing clusters merged). Default: the blocks as given.")
@click.option("--energy", type=click.Choice(ENERGY_METHODS), default=TV,
              show_default=True)
@click.option("--keep", default=0, show_default=True,
              help="Mimicked matrices written as CSV per setup.")
@click.option("--seed", default=0, show_default=True, help="Master seed.")
@click.option("-o", "--out", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.pass_context
@guarded
def mimic(ctx, matrix, blocks_file, reps, mode, merge, energy, keep, seed,
          out):
    manifest = _start(ctx, "mimic", seed)
    manifest.add_input(matrix)
    manifest.add_input(blocks_file)
    M = discretize(read_matrix(matrix))
    saved = read_coupling(blocks_file)
    rp, row_order = _aligned(saved["row_partition"],
                             saved.get("row_cluster_order",
                                       range(saved["row_partition"].k)),
                             saved["row_labels"], M.row_labels, "row")
    cp, col_order = _aligned(saved["col_partition"],
                             saved.get("col_cluster_order",
                                       range(saved["col_partition"].k)),
                             saved["col_labels"], M.col_labels, "column")
    ensure_dir(out)
    summary = {}
    for r, c in _parse_setups(merge, rp.k, cp.k):
        bd = blocks(M, merge_partition(rp, r, row_order),
                    merge_partition(cp, c, col_order))
        samples = mimic_ensemble(M, bd, reps, mode, seed, energy, keep)
        write_energy(samples.values, samples.label,
                     os.path.join(out, f"energy_{samples.label}.tsv"))
        for i, grid in enumerate(samples.examples):
            write_matrix(M.with_values(grid),
                         os.path.join(out, f"mimic_{samples.label}_{i}.csv"))
        summary[samples.label] = {"observed": samples.observed,
                                  "mean": samples.mean, "std": samples.std,
                                  "reps": reps}
        click.echo(f"{samples.label}: observed {samples.observed:.6g}, "
                   f"mimicked mean {samples.mean:.6g} (sd {samples.std:.3g})")
    write_json({"mode": mode, "energy": energy, "setups": summary},
               os.path.join(out, "summary.json"))
    manifest.finish(out)


@main.command("score", help="Score aligned sequences into a standardized "
              "similarity matrix.")
@click.argument("alignment", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(FORMATS), default=None,
              help="Alignment format (guessed from the first line).")
@click.option("--open", "gap_open", default=15.0, show_default=True,
              help="Gap opening penalty.")
@click.option("--extend", "gap_extend", default=0.2, show_default=True,
              help="Gap extension penalty per position.")
@click.option("--verbose", "show_pairs", is_flag=True,
              help="Print the raw score of every pair.")
@click.option("-o", "--out", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.pass_context
@guarded
def score(ctx, alignment, fmt, gap_open, gap_extend, show_pairs, out):
    manifest = _start(ctx, "score")
    manifest.add_input(alignment)
    aln = read_alignment(alignment, fmt)
    if aln.k < 3:
        raise ValueError(f"need at least 3 sequences to standardize, got "
                         f"{aln.k}")
    params = ScoringParams(gap_open, gap_extend)
    scores, records = normalized_scores(aln, params)
    S = standardize(scores)
    ensure_dir(out)
    write_square(S, aln.names, os.path.join(out, "similarity.csv"))
    with open(os.path.join(out, "pairs.tsv"), "w") as f:
        f.write("first\tsecond\traw\tcommon_length\tnormalized\n")
        for i, j, pair in records:
            line = (f"{aln.names[i]}\t{aln.names[j]}\t{pair.raw!r}\t"
                    f"{pair.common_length}\t{pair.normalized!r}")
            f.write(line + "\n")
            if show_pairs:
                click.echo(line)
    manifest.finish(out)


@main.command("sites", help="Extract the polytypic sites of an alignment as "
              "a coded matrix for `dm` and `mimic`.")
@click.argument("alignment", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(FORMATS), default=None,
              help="Alignment format (guessed from the first line).")
@click.option("-o", "--out", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.pass_context
@guarded
def sites(ctx, alignment, fmt, out):
    manifest = _start(ctx, "sites")
    manifest.add_input(alignment)
    M = polytypic_matrix(read_alignment(alignment, fmt))
    ensure_dir(out)
    write_matrix(M, os.path.join(out, "sites.csv"))
    manifest.finish(out)
    click.echo(f"{M.shape[0]} polytypic sites over {M.shape[1]} sequences")


def _swap_out(argv, out_dir):
    argv = list(argv)
    for i, arg in enumerate(argv):
        if arg in ("-o", "--out") and i + 1 < len(argv):
            argv[i + 1] = out_dir
            return argv
        if arg.startswith("--out="):
            argv[i] = f"--out={out_dir}"
            return argv
    raise ValueError("manifest argv has no --out option")


@main.command("verify", help="Re-run the command recorded in a manifest and "
              "compare output digests.")
@click.argument("manifest_path", type=click.Path(exists=True,
                                                 dir_okay=False))
@click.pass_context
@guarded
def verify(ctx, manifest_path):
    recorded = read_manifest(manifest_path)
    if not recorded.argv:
        raise ValueError(f"{manifest_path} records no command line")
    here = os.getcwd()
    os.chdir(recorded.cwd)
    try:
        for path, digest in recorded.inputs.items():
            if not os.path.exists(path) or file_digest(path) != digest:
                raise ValueError(f"input {path} changed since the run")
        with tempfile.TemporaryDirectory() as tmp:
            argv = _swap_out(recorded.argv, tmp)
            try:
                main.main(args=argv, prog_name="dcgkit",
                          standalone_mode=False, obj={"argv": argv})
            except SystemExit as e:
                if e.code not in (0, None, EMPTY_SELECTION):
                    raise ValueError(f"re-run failed with exit code {e.code}")
            mismatched = compare_outputs(recorded.outputs, tmp)
    finally:
        os.chdir(here)
    if mismatched:
        for name in mismatched:
            click.echo(f"MISMATCH {name}", err=True)
        ctx.exit(RUN_ERROR)
    click.echo(f"verified {len(recorded.outputs)} outputs of "
               f"`{recorded.command}`")


def run():
    main(obj={"argv": sys.argv[1:]})
