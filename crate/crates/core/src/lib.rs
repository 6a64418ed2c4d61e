//! Choreography enforcement through coordination delegates.

pub mod cm;
pub mod delegate;
pub mod generator;
pub mod interp;
pub mod model;
pub mod oracle;
pub mod participants;
pub mod predicate;
pub mod scenario;
pub mod sim;
pub mod validate;
