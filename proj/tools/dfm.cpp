#include <cstdio>
int main() { std::puts("dfm: not wired yet"); return 0; }
