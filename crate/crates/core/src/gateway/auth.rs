use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::store::Credential;

fn digest(salt: &str, password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(b":");
    h.update(password.as_bytes());
    hex::encode(h.finalize())
}

pub fn hash_password(password: &str) -> Credential {
    let mut salt = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut salt);
    let salt = hex::encode(salt);
    Credential { hash: digest(&salt, password), salt }
}

pub fn verify_password(c: &Credential, password: &str) -> bool {
    let got = digest(&c.salt, password);
    // length is fixed, compare without early exit
    got.len() == c.hash.len() && got.bytes().zip(c.hash.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

pub fn new_token() -> String {
    let mut raw = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut raw);
    hex::encode(raw)
}
