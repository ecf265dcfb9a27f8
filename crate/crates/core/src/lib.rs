pub mod adversary;
pub mod crypto;
pub mod detection;
pub mod exponents;
pub mod protocol;
pub mod ring;
pub mod scenario;
pub mod typestat;
