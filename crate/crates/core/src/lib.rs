pub mod network;
pub mod gcda;
pub mod investor;
pub mod equilibrium;
pub mod stochastic;
