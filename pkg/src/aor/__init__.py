"""aor: act-observe-rewrite tabletop manipulation harness.

A deterministic kinematic simulator with synthetic RGB-D rendering, a color
segmentation vision pipeline with convention-correct back-projection, a
sandboxed hot-reloadable controller runtime, persistent episodic memory, and
a between-episode rewriter loop (scripted mock or HTTP LLM backend).
"""

__version__ = "0.1.0"
