"""Checkpoint helpers above the flow/critic model layer.

Flow models already serialize themselves (self-describing architecture
header + named parameter slices, atomic write); this module adds the step
tag and the critic's two-store (online + target) packing on the same file
format, so every checkpoint in a run directory opens with the same magic
and validates the same way.
"""

from __future__ import annotations

from pathlib import Path

from . import autodiff as ad
from .autodiff import ParamStore
from .errors import CheckpointError
from .flow import FlowModel


def save_flow_checkpoint(path, model: FlowModel, step: int = 0) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    model.save(str(path), extra={"step": str(step)})


def load_flow_checkpoint(path) -> tuple[FlowModel, int]:
    header, _, _ = ad.load_checkpoint(str(path))
    if header.get("kind") != "flow":
        raise CheckpointError(
            f"{path}: expected a flow checkpoint, got kind={header.get('kind')!r}")
    model, header = FlowModel.load(str(path))
    return model, int(header.get("step", 0))


def _merged_layout(critic) -> ParamStore:
    named = {f"online.{n}": critic.store.view(n) for n in critic.store.names()}
    named.update(
        {f"target.{n}": critic.target.view(n) for n in critic.target.names()})
    return ParamStore(named)


def save_critic_checkpoint(path, critic, step: int = 0) -> None:
    header = {
        "kind": "critic", "step": str(step),
        "in_dim": str(critic.in_dim),
        "hidden": ",".join(str(h) for h in critic.hidden),
        "tau": repr(critic.tau), "twin": str(int(critic.twin)),
        "seed": str(critic.seed),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(str(path), _merged_layout(critic), header)


def load_critic_checkpoint(path):
    from .agents import CriticNet

    header, values, slices = ad.load_checkpoint(str(path))
    if header.get("kind") != "critic":
        raise CheckpointError(
            f"{path}: expected a critic checkpoint, got kind={header.get('kind')!r}")
    try:
        critic = CriticNet(int(header["in_dim"]),
                           hidden=tuple(int(h)
                                        for h in header["hidden"].split(",")),
                           tau=float(header["tau"]),
                           twin=bool(int(header["twin"])),
                           seed=int(header["seed"]))
    except KeyError as e:
        raise CheckpointError(f"{path}: checkpoint header missing field {e}") from e
    merged = _merged_layout(critic)
    ad.restore_store(merged, values, slices)
    for n in critic.store.names():
        critic.store.view(n)[:] = merged.view(f"online.{n}")
        critic.target.view(n)[:] = merged.view(f"target.{n}")
    return critic, int(header.get("step", 0))
