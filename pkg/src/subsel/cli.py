"""Command-line client for the selection service.

Every subcommand is a thin HTTP call: against a remote server when
--server is given, otherwise against the in-process application. Exit
codes: 0 success, 2 invalid configuration, 3 oracle failure.
"""

from __future__ import annotations

import json
import sys
from typing import List, Optional

import click
import httpx

from .errors import ConfigError
from .harness import load_config_doc

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ORACLE = 3


def _client(server: Optional[str]) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server.rstrip("/"), timeout=None)
    from fastapi.testclient import TestClient

    from .service import create_app
    return TestClient(create_app())


def _load_doc(path: str) -> dict:
    try:
        return load_config_doc(path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _finish(resp: httpx.Response) -> None:
    try:
        click.echo(json.dumps(resp.json(), indent=2))
    except ValueError:
        click.echo(resp.text)
    if resp.status_code == 200:
        sys.exit(EXIT_OK)
    if resp.status_code in (400, 422):
        sys.exit(EXIT_CONFIG)
    if resp.status_code == 502:
        sys.exit(EXIT_ORACLE)
    sys.exit(1)


server_option = click.option("--server", default=None, metavar="URL",
                             help="Remote service URL; default runs in process.")


@click.group()
def main() -> None:
    """Budget-constrained training-subset selection."""


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Run a single seed.")
@click.option("--agent", default=None, help="Override the configured agent.")
@click.option("--out", default=None, help="Override the output directory.")
@server_option
def run(config_path: str, seed: Optional[int], agent: Optional[str],
        out: Optional[str], server: Optional[str]) -> None:
    """Run the configured experiment for every seed."""
    doc = _load_doc(config_path)
    if seed is not None:
        doc["seeds"] = [seed]
    if agent is not None:
        doc["agent"] = agent
    if out is not None:
        doc["out_dir"] = out
    with _client(server) as client:
        _finish(client.post("/run", json=doc))


def _parse_values(axis: str, raw: str) -> List:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        click.echo("no sweep values given", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        if axis == "k":
            return [int(p) for p in parts]
        if axis == "delta":
            return [float(p) for p in parts]
    except ValueError as exc:
        click.echo(f"bad sweep value: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    return parts


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--axis", required=True,
              type=click.Choice(["k", "delta", "agent", "encoder"]))
@click.option("--values", required=True,
              help="Comma-separated axis values, e.g. 0.03125,0.0625,0.125")
@server_option
def sweep(config_path: str, axis: str, values: str, server: Optional[str]) -> None:
    """Sweep one configuration axis; failures stay isolated per cell."""
    doc = _load_doc(config_path)
    body = {"config": doc, "axis": axis, "values": _parse_values(axis, values)}
    with _client(server) as client:
        _finish(client.post("/sweep", json=body))


@main.command()
@click.option("--report", "report_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--out", default=None, help="Destination for the point-id file.")
@server_option
def export(report_path: str, seed: Optional[int], out: Optional[str],
           server: Optional[str]) -> None:
    """Expand a run's selected clusters into a point-id file."""
    body = {"report_path": report_path, "seed": seed, "out": out}
    with _client(server) as client:
        _finish(client.post("/export", json=body))


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@server_option
def brute(config_path: str, server: Optional[str]) -> None:
    """Exact enumeration optimum for the configured landscape."""
    doc = _load_doc(config_path)
    with _client(server) as client:
        _finish(client.post("/brute", json=doc))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host: str, port: int) -> None:
    """Start the HTTP service."""
    import uvicorn

    from .service import app
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
