//! Control-plane payloads carried inside envelopes.

use serde::{Deserialize, Serialize};

use crate::identity::{self, AccessToken, FedId, KeyPair, PublicKey, Signature};
use crate::transport::Address;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub requester: FedId,
    /// Must equal the requester's key in the directory.
    pub requester_key: PublicKey,
    pub requester_name: String,
    pub requester_address: Address,
    pub community_id: FedId,
    pub signature: Signature,
}

impl JoinRequest {
    pub fn new(
        requester: FedId,
        requester_name: String,
        requester_address: Address,
        community_id: FedId,
        key: &KeyPair,
    ) -> Self {
        let mut req = JoinRequest {
            requester,
            requester_key: key.public_key(),
            requester_name,
            requester_address,
            community_id,
            signature: Signature([0; 64]),
        };
        req.signature = key.sign(&req.signing_bytes());
        req
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let addr = self.requester_address.to_string();
        let mut out = b"comverse-join-v1".to_vec();
        for f in [
            self.requester.as_str().as_bytes(),
            self.requester_key.as_bytes().as_slice(),
            self.requester_name.as_bytes(),
            addr.as_bytes(),
            self.community_id.as_str().as_bytes(),
        ] {
            out.extend_from_slice(&(f.len() as u32).to_be_bytes());
            out.extend_from_slice(f);
        }
        out
    }

    pub fn verify(&self) -> bool {
        identity::verify(&self.signing_bytes(), &self.signature, &self.requester_key).unwrap_or(false)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityInfo {
    pub community_id: FedId,
    pub name: String,
    pub address: Address,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JoinVerdict {
    Approved,
    Denied,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinResponse {
    pub community_id: FedId,
    pub member_id: FedId,
    pub verdict: JoinVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub community: Option<CommunityInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUpdate {
    pub token: AccessToken,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveNotice {
    pub community_id: FedId,
    pub member_id: FedId,
}
