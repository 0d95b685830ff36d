use rand::Rng;

pub const TOKEN_LEN: usize = 10;
const CHARSET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

/// Ten characters drawn uniformly from `[a-z0-9]`.
pub fn generate_token<R: Rng + ?Sized>(rng: &mut R) -> String {
    (0..TOKEN_LEN)
        .map(|_| CHARSET[rng.random_range(0..CHARSET.len())] as char)
        .collect()
}

/// Draws until the token is not in use. The caller supplies the live set.
pub fn generate_unique_token<R: Rng + ?Sized>(rng: &mut R, in_use: impl Fn(&str) -> bool) -> String {
    loop {
        let t = generate_token(rng);
        if !in_use(&t) {
            return t;
        }
    }
}

pub fn is_valid_token(token: &str) -> bool {
    token.len() == TOKEN_LEN
        && token
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
}
