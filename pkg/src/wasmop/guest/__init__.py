"""Guest-side toolchain: a structured wasm assembler, a library of runtime
fragments (cooperative executor, pending-operation table, envelope and JSON
helpers), and the concrete controller programs built from them."""
