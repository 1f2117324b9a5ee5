//! Building blocks for a content gathering network: proxies placed near web
//! servers fetch a page's resources over short round trips and ship them to
//! distant clients in one batch.

pub mod census;
pub mod mapping;
pub mod model;
pub mod siteselect;
pub mod stats;
pub mod gatherwire;
pub mod netem;
pub mod perfmodel;
pub mod pagesim;
pub mod gatherproxy;
pub mod fsutil;
pub mod clientproxy;
