fn main() {
    println!("placeholder during bring-up");
}
