#include <cstdio>

int main() {
    std::puts("spt: pipeline CLI (under construction)");
    return 0;
}
