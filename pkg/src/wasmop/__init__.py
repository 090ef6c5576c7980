"""wasmop: an on-demand controller host.

Runs Kubernetes-style reconciliation controllers as WebAssembly guest modules,
drives them through a single asyncio event loop, and swaps idle instances out
to disk snapshots so quiescent controllers cost no resident memory.
"""

__version__ = "0.1.0"
