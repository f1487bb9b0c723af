"""Build one concept graph per attack mission and look at what is inside.

The stub provider stands in for a language model: it draws words from a
fixed seeded vocabulary, so the output is the same on every machine.
Swap in ``make_provider("http", endpoint=...)`` to query a real service.
"""

from trafficsem import kg
from trafficsem.providers import StubProvider

provider = StubProvider(seed=0)

for mission in ("DoS", "Reconnaissance", "Brute Force"):
    g = kg.build_graph(mission, provider, v=6, n=2)
    sizes = [len(layer.concepts) for layer in g.layers]
    report = kg.validate_graph(g)
    print(f"{mission}")
    print(f"  layers      {sizes}")
    print(f"  edges       {len(g.edges)} (expected {kg.expected_edge_count(sizes)})")
    print(f"  valid       {report.ok}")
    for layer in g.layers:
        print(f"  L{layer.index}          {', '.join(layer.concepts)}")

# the validator catches structural mistakes, e.g. a back edge
g = kg.build_graph("DoS", provider, v=4, n=2)
back = (g.node_ids[-2], g.node_ids[1])
broken = kg.KnowledgeGraph(g.mission, g.layers, g.edges + (back,))
print("\nwith a back edge:", sorted(kg.validate_graph(broken).kinds()))
