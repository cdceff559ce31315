//! A federated social-mesh engine.
//!
//! Each autonomous social network (ASN) hosts its users, a hierarchy of
//! subdomains, roles, public groups and private groups. Messages are tagged
//! with circles, and [`fipm`] decides who may read them by walking the circle
//! hierarchy under each circle's policies. [`privilege`] computes what users
//! may do; [`federation`] moves messages and circle replicas between paired
//! ASNs; [`store`] keeps an instance's state on disk.

pub mod bench;
pub mod client;
pub mod cluster;
pub mod config;
pub mod federation;
pub mod fipm;
pub mod gateway;
pub mod ids;
pub mod model;
pub mod node;
pub mod policy;
pub mod privilege;
pub mod scenario;
pub mod store;
