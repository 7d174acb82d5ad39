"""``layerprobe`` command line.

Exit codes: 0 success, 2 configuration error, 3 input error, 4 numerical failure.
"""

from __future__ import annotations

import logging
import sys

import click

from .cca import CcaError
from .config import ConfigError, load_config, resolve_output_dir, with_overrides
from .corpus_io import CorpusError
from .ctc_eval import ScoringError
from .dsp.wav import WavError
from .pipelines import COMMANDS, InputError
from .pooling import PoolingError
from .probe import ProbeDivergedError, ProbeError

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("layerprobe")


def _exit_code(exc: BaseException) -> int | None:
    # order matters: ProbeDivergedError is a ProbeError, CcaError a ValueError
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (CcaError, ProbeDivergedError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (InputError, CorpusError, PoolingError, ScoringError, WavError, ProbeError,
                        FileNotFoundError)):
        return EXIT_INPUT
    return None


def _run(name: str, config: str, out: str | None, jobs: int | None, seed: int | None) -> None:
    try:
        cfg = with_overrides(load_config(config), seed=seed, jobs=jobs)
        out_dir = resolve_output_dir(cfg, out)
        result = COMMANDS[name](cfg, out_dir)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        click.echo(f"layerprobe {name}: error: {exc}", err=True)
        sys.exit(code)
    log.info("%s finished, outputs in %s", name, out_dir)
    if isinstance(result, list) and result and isinstance(result[0], str):
        for f in result:
            click.echo(str(out_dir / f))


def _command(name: str, help_text: str):
    @click.command(name=name, help=help_text)
    @click.option("--config", "-c", "config", required=True, type=click.Path(dir_okay=False),
                  help="TOML run configuration.")
    @click.option("--out", "-o", default=None, help="Output directory (overrides $LAYERPROBE_OUT and the config).")
    @click.option("--jobs", "-j", type=int, default=None, help="Worker threads for per-layer and per-utterance work.")
    @click.option("--seed", type=int, default=None, help="Override the global seed.")
    def cmd(config, out, jobs, seed):
        _run(name, config, out, jobs, seed)

    return cmd


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
@click.version_option(package_name="artifact")
def main(verbose: int) -> None:
    """Layer-wise analysis of speech encoder representations."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


for _name, _help in (
    ("ingest", "Validate a manifest with alignments/labels and write normalized copies."),
    ("pool", "Pool representation dumps into phoneme or labeled-window datasets."),
    ("cca-phoneme", "Layer-wise PWCCA between pooled phoneme vectors and one-hot phone labels."),
    ("cca-paraling", "Layer-wise PWCCA between window vectors and acoustic feature groups."),
    ("probe", "Train the weighted-average layer probe and export layer weights."),
    ("score", "Phone error rates and a matched-pairs significance test."),
    ("report", "Re-render charts and a markdown summary from existing result tables."),
):
    main.add_command(_command(_name, _help))


if __name__ == "__main__":
    main()
