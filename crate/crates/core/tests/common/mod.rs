#![allow(dead_code)]

pub mod http_contract;
pub mod stub_server;
