pub mod agents;
pub mod mac;
pub mod metrics;
pub mod mobility;
pub mod network;
pub mod phy;
pub mod road;
pub mod routing;
pub mod scenario;
pub mod sim;
pub mod trace;
