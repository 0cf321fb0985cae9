pub mod fem;
pub mod io;
pub mod lp;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod search;
pub mod sparse;
