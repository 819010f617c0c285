pub mod architectures;
pub mod corpus;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod planner;
pub mod training;
