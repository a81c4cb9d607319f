"""DOT rendering of a genotype: one cluster per cell plus the fusion cell."""
from __future__ import annotations

from .primitives import DILATION, LIGHTWEIGHT, PrimitiveKind
from .searchspace import FusionTemplate, Genotype, NetworkTopology

LIGHT = {k.value for k in LIGHTWEIGHT}


def _edge_attrs(op):
    kind = PrimitiveKind(op)
    label = op
    attrs = []
    if kind in DILATION and DILATION[kind] > 1:
        label = f"{op}\\nd={DILATION[kind]}"
        attrs.append('color="forestgreen"')
    if op in LIGHT:
        attrs.append("style=dashed")
    return [f'label="{label}"'] + attrs


def genotype_to_dot(g: Genotype) -> str:
    topo = NetworkTopology.from_echo(g.topology)
    lines = ["digraph genotype {", "  rankdir=LR;", "  node [shape=box];"]
    for k, ops in enumerate(g.cells):
        tpl = topo.template(k)
        kind = "reduction" if tpl.is_reduction else "normal"
        lines.append(f"  subgraph cluster_cell{k} {{")
        lines.append(f'    label="cell {k} ({kind})";')
        n_total = tpl.num_inputs + tpl.num_nodes
        for n in range(n_total):
            lines.append(f'    c{k}_{tpl.node_name(n)} [label="{tpl.node_name(n)}"];')
        lines.append(f'    c{k}_out [label="out"];')
        for e, (src, dst) in enumerate(tpl.edges):
            attrs = ", ".join(_edge_attrs(ops[e]))
            lines.append(f"    c{k}_{tpl.node_name(src)} -> c{k}_{tpl.node_name(dst)} [{attrs}];")
        for n in range(tpl.num_inputs, n_total):
            lines.append(f"    c{k}_{tpl.node_name(n)} -> c{k}_out;")
        lines.append("  }")
    if g.fusion is not None:
        ft = FusionTemplate()
        lines.append("  subgraph cluster_fusion {")
        lines.append('    label="fusion";')
        for name in ft.node_names:
            lines.append(f'    f_{name} [label="{name}"];')
        lines.append('    f_out [label="sum"];')
        for e, ed in enumerate(ft.edges):
            attrs = ", ".join(_edge_attrs(g.fusion[e]))
            lines.append(f"    f_{ft.node_names[ed.src]} -> f_{ft.node_names[ed.dst]} [{attrs}];")
        for n in ft.outputs:
            lines.append(f"    f_{ft.node_names[n]} -> f_out;")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
