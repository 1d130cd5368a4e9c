//! Apps running on a fedlet.
//!
//! An app only sees its own namespace: ids passed to [`AppContext`] are
//! app-local and resolve to `{app_id}/{id}` in the store.

use std::any::Any;

use crate::fedcore::{
    Cell, Entries, Fedcore, FedcoreError, ObjectSnapshot, Principal, RoundGuard, RoundStatus, ViewState,
};
use crate::fedcore::notify::AppEvent;
use crate::fedctl::Fedctl;
use crate::identity::FedId;

pub trait App: Send {
    fn app_id(&self) -> &str;

    /// Called once after installation.
    fn start(&mut self, _ctx: &mut AppContext<'_>) {}

    fn on_event(&mut self, event: &AppEvent, ctx: &mut AppContext<'_>);

    /// Called on every fedlet tick.
    fn on_tick(&mut self, _ctx: &mut AppContext<'_>) {}

    fn as_any(&self) -> &dyn Any;
}

pub struct AppContext<'a> {
    app_id: &'a str,
    fedcore: &'a mut Fedcore,
    fedctl: &'a mut Fedctl,
    now_ms: u64,
}

impl<'a> AppContext<'a> {
    pub(crate) fn new(app_id: &'a str, fedcore: &'a mut Fedcore, fedctl: &'a mut Fedctl, now_ms: u64) -> Self {
        AppContext {
            app_id,
            fedcore,
            fedctl,
            now_ms,
        }
    }

    pub fn app_id(&self) -> &str {
        self.app_id
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn host_id(&self) -> &FedId {
        self.fedctl.host_id()
    }

    /// Store id of an app-local id.
    pub fn scoped(&self, id: &str) -> String {
        format!("{}/{}", self.app_id, id)
    }

    fn principal(&self) -> Principal {
        Principal::local(&format!("app:{}", self.app_id))
    }

    /// Logged in the fedcore access log like any other read.
    pub fn read(&mut self, id: &str) -> Result<ObjectSnapshot, FedcoreError> {
        let (object_id, principal) = (self.scoped(id), self.principal());
        self.fedcore.get_object(&object_id, &principal, self.fedctl, self.now_ms)
    }

    pub fn put(&mut self, id: &str, entries: Entries) -> Result<u64, FedcoreError> {
        self.fedcore.put_object(&self.scoped(id), entries)
    }

    pub fn insert_row(&mut self, table: &str, row: Vec<Cell>) -> Result<u64, FedcoreError> {
        self.fedcore.insert_row(&self.scoped(table), row)
    }

    pub fn view(&self, view_id: &str) -> Option<&ViewState> {
        self.fedcore.view(&self.scoped(view_id))
    }

    pub fn open_round(&mut self, aggregate: &str, guard: Option<RoundGuard>) -> Result<u64, FedcoreError> {
        let id = self.scoped(aggregate);
        self.fedcore.open_round(&id, guard, self.fedctl, self.now_ms)
    }

    pub fn round_status(&self, aggregate: &str) -> Option<RoundStatus> {
        self.fedcore.round_status(&self.scoped(aggregate))
    }

    /// Ask a member of our community for one of its objects; the answer
    /// arrives as a `RemoteRead` event carrying the returned request id.
    pub fn read_remote(&mut self, member_id: &FedId, id: &str) -> Result<u64, FedcoreError> {
        let object_id = self.scoped(id);
        self.fedcore.request_remote_read(self.app_id, member_id, &object_id, self.fedctl)
    }

    /// Active members of the community this fedlet hosts.
    pub fn active_members(&self) -> Vec<FedId> {
        self.fedctl.active_members().map(|m| m.member_id.clone()).collect()
    }

    /// Communities this fedlet has joined.
    pub fn communities(&self) -> Vec<FedId> {
        self.fedctl.communities().map(|c| c.community_id.clone()).collect()
    }
}
