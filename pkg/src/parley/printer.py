"""Canonical source rendering for protocol trees.

``parse(serialize(p)) == p`` for every valid protocol: the printer emits the
one canonical spelling (empty payload lists dropped, bare-sort fields
shortened, four-space indents), and the parser accepts it back.
"""

from __future__ import annotations

from .protocol import (
    Choice,
    Continue,
    End,
    GlobalProtocol,
    Interaction,
    LocalProtocol,
    MessageSignature,
    Parallel,
    Rec,
    Receive,
    Send,
)

_INDENT = "    "


def serialize(protocol) -> str:
    """Render a GlobalProtocol or LocalProtocol back to source text."""
    if isinstance(protocol, GlobalProtocol):
        header = f"global protocol {protocol.name}({_roles(protocol.roles)}) {{"
    elif isinstance(protocol, LocalProtocol):
        header = (
            f"local protocol {protocol.name} at {protocol.self_role}"
            f"({_roles(protocol.roles)}) {{"
        )
    else:
        raise TypeError(f"cannot serialize {type(protocol).__name__}")
    lines = [header]
    _emit(protocol.body, lines, 1)
    lines.append("}")
    return "\n".join(lines) + "\n"


def _roles(roles) -> str:
    return ", ".join(f"role {r}" for r in roles)


def _signature(sig: MessageSignature) -> str:
    if not sig.payload:
        return sig.label
    fields = ", ".join(
        f.sort if f.name == f.sort else f"{f.sort}:{f.name}" for f in sig.payload
    )
    return f"{sig.label}({fields})"


def _emit(node, lines, depth) -> None:
    pad = _INDENT * depth
    while True:
        if isinstance(node, End):
            return
        if isinstance(node, Interaction):
            if node.assertion is not None:
                lines.append(f"{pad}@{{{node.assertion.source_text}}}")
            lines.append(f"{pad}{_signature(node.sig)} from {node.src} to {node.dst};")
            node = node.cont
        elif isinstance(node, Send):
            if node.assertion is not None:
                lines.append(f"{pad}@{{{node.assertion.source_text}}}")
            lines.append(f"{pad}{_signature(node.sig)} to {node.dst};")
            node = node.cont
        elif isinstance(node, Receive):
            if node.assertion is not None:
                lines.append(f"{pad}@{{{node.assertion.source_text}}}")
            lines.append(f"{pad}{_signature(node.sig)} from {node.src};")
            node = node.cont
        elif isinstance(node, Choice):
            for i, branch in enumerate(node.branches):
                opener = f"choice at {node.at} {{" if i == 0 else "} or {"
                lines.append(f"{pad}{opener}")
                _emit(branch, lines, depth + 1)
            lines.append(f"{pad}}}")
            return
        elif isinstance(node, Rec):
            lines.append(f"{pad}rec {node.var} {{")
            _emit(node.body, lines, depth + 1)
            lines.append(f"{pad}}}")
            return
        elif isinstance(node, Continue):
            lines.append(f"{pad}{node.var};")
            return
        elif isinstance(node, Parallel):
            for i, branch in enumerate(node.branches):
                opener = "parallel {" if i == 0 else "} and {"
                lines.append(f"{pad}{opener}")
                _emit(branch, lines, depth + 1)
            lines.append(f"{pad}}}")
            node = node.cont
        else:
            raise TypeError(f"cannot serialize node {type(node).__name__}")
