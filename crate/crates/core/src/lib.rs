pub mod agent;
pub mod client;
pub mod model;
pub mod protocol;
pub mod services;
pub mod sitesim;
pub mod store;
pub mod swrepo;
pub mod wire;
