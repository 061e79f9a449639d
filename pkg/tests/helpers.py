"""Hand-built graphs shared by the tests."""

from swaptrain.graph_core import ComputationGraph, LayerKind, LayerProfile


def node(i, *, mem=1, fwd=10, bwd=20, load=10, out=1000, name=None, kind=LayerKind.OTHER, mem_bwd=None):
    return LayerProfile(i, name or f"n{i}", kind, 100, mem, mem if mem_bwd is None else mem_bwd,
                        fwd, bwd, load, out)


def chain(n=None, *, mem=None, fwd=None, bwd=None, load=None, out=None):
    """Chain of ``n`` nodes; any field may be a scalar or a per-node list."""
    fields = dict(mem=mem, fwd=fwd, bwd=bwd, load=load, out=out)
    if n is None:
        n = max(len(v) for v in fields.values() if isinstance(v, (list, tuple)))
    nodes = []
    for i in range(n):
        kw = {}
        for k, v in fields.items():
            if v is None:
                continue
            kw[k] = v[i] if isinstance(v, (list, tuple)) else v
        nodes.append(node(i, **kw))
    return ComputationGraph.chain(nodes)
