//! Executable optimality checks (stub).
