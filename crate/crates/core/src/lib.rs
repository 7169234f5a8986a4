pub mod cli;
pub mod ebci;
pub mod error;
pub mod lp;
pub mod moments;
pub mod nonlinear;
pub mod optimize;
pub mod quadrature;
pub mod rho;
pub mod sim;
pub mod special;
