//! Monte-Carlo simulation of the closed-loop game dynamics (stub).
