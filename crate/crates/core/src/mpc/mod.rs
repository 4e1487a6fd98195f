//! MPC (placeholder).
